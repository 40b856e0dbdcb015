use cf_fuse_core::config::Config;
use cf_fuse_core::model::{Model, ModelConfig};
use cf_fuse_core::optim::Sgd;
use cf_fuse_core::train::{evaluate_model, train_model};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let count: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(60);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);

    let mut cfg = Config::default();
    cfg.set("data.count", count);
    cfg.set("data.size", 64);
    cfg.set("train.epochs", epochs);
    let corpus = cf_fuse_core::data::generate_corpus(&cfg.data_config().unwrap(), 7).unwrap();
    let (train, eval) = corpus.split(0.8);
    let tcfg = cfg.train_config().unwrap();
    let ecfg = cfg.eval_config().unwrap();

    for (name, use_rsr, use_dfs) in [
        ("baseline", false, false),
        ("rsr", true, false),
        ("dfs", false, true),
        ("both", true, true),
    ] {
        for seed in 0..seeds {
            let mcfg = ModelConfig { use_rsr, use_dfs, ..ModelConfig::default() };
            let model = Model::new(mcfg, seed).unwrap();
            let mut opt = Sgd::new(&model.params(), tcfg.lr, tcfg.momentum, tcfg.weight_decay);
            let t0 = Instant::now();
            let mut last_loss = 0.0;
            train_model(&model, train, &tcfg, seed, 0, &mut opt, |_, r| last_loss = r.total).unwrap();
            let m = evaluate_model(&model, eval, &ecfg).unwrap();
            println!(
                "{name:9} seed={seed} mAP50={:.3} mAP={:.3} MR2={:.3} loss_end={:.3} ({:.0}s)",
                m.map50, m.map, m.mr2, last_loss, t0.elapsed().as_secs_f64()
            );
        }
    }
}
