use cf_fuse_core::config::{Config, TrainConfig};
use cf_fuse_core::model::{Model, ModelConfig};
use cf_fuse_core::optim::Sgd;
use cf_fuse_core::train::{evaluate_model, train_model};
use rayon::prelude::*;

fn main() {
    let mut cfg = Config::default();
    cfg.set("data.count", 100);
    cfg.set("data.size", 64);
    let corpus = cf_fuse_core::data::generate_corpus(&cfg.data_config().unwrap(), 7).unwrap();
    let (train, eval) = corpus.split(0.8);
    let ecfg = cfg.eval_config().unwrap();

    let grid: Vec<(f64, f64)> = vec![(0.01, 4.0), (0.01, 10.0), (0.02, 10.0), (0.03, 10.0)];
    let results: Vec<String> = grid
        .par_iter()
        .map(|&(lr, pw)| {
            let tcfg = TrainConfig {
                epochs: 12,
                lr,
                momentum: 0.9,
                weight_decay: 1e-4,
                gamma: 1e-3,
                obj_pos_weight: pw,
                lr_step_epoch: 9,
                lr_step_factor: 0.1,
            };
            let model = Model::new(ModelConfig { use_rsr: false, use_dfs: false, ..ModelConfig::default() }, 0).unwrap();
            let mut opt = Sgd::new(&model.params(), tcfg.lr, tcfg.momentum, tcfg.weight_decay);
            let mut last = 0.0;
            train_model(&model, train, &tcfg, 0, 0, &mut opt, |_, r| last = r.total).unwrap();
            let m = evaluate_model(&model, eval, &ecfg).unwrap();
            format!("lr={lr} pos_w={pw}: mAP50={:.3} mAP={:.3} MR2={:.3} loss_end={:.3}", m.map50, m.map, m.mr2, last)
        })
        .collect();
    for r in results {
        println!("{r}");
    }
}
