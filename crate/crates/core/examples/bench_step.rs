use cf_fuse_core::config::Config;
use cf_fuse_core::model::{Model, ModelConfig};
use cf_fuse_core::optim::Sgd;
use cf_fuse_core::train::train_model;
use std::time::Instant;

fn main() {
    let mut cfg = Config::default();
    cfg.set("data.count", 32);
    cfg.set("data.size", 64);
    let corpus = cf_fuse_core::data::generate_corpus(&cfg.data_config().unwrap(), 1).unwrap();
    let tcfg = cfg.train_config().unwrap();
    for (name, use_rsr, use_dfs) in [("both", true, true), ("baseline", false, false)] {
        let mcfg = ModelConfig { use_rsr, use_dfs, ..ModelConfig::default() };
        let model = Model::new(mcfg, 1).unwrap();
        let mut opt = Sgd::new(&model.params(), tcfg.lr, tcfg.momentum, tcfg.weight_decay);
        let one_epoch = cf_fuse_core::config::TrainConfig { epochs: 1, ..tcfg };
        let t0 = Instant::now();
        train_model(&model, &corpus.scenes, &one_epoch, 1, 0, &mut opt, |_, _| {}).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{name}: {:.1} ms/step ({} params)", dt / 32.0 * 1000.0, model.params().iter().map(|p| p.tensor.len()).sum::<usize>());
    }
}
