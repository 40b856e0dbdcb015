use cf_fuse_core::config::{Config, TrainConfig};
use cf_fuse_core::model::{Model, ModelConfig};
use cf_fuse_core::optim::Sgd;
use cf_fuse_core::train::{detect_scenes, evaluate_model, train_model};
use rayon::prelude::*;

fn main() {
    // Q1: does the baseline learn when there is NO noise?
    // Q2: loss term breakdown at the end of training
    // Q3: what do predictions look like?
    let configs = [("noise0.30", 0.30), ("noise0.15", 0.15), ("noise0.00", 0.0)];
    let results: Vec<String> = configs
        .par_iter()
        .map(|&(name, amp)| {
            let mut cfg = Config::default();
            cfg.set("data.count", 100);
            cfg.set("data.size", 64);
            if amp == 0.0 {
                cfg.set("data.noise", "off");
            } else {
                cfg.set("data.noise_amplitude", amp);
            }
            let corpus = cf_fuse_core::data::generate_corpus(&cfg.data_config().unwrap(), 7).unwrap();
            let (train, eval) = corpus.split(0.8);
            let tcfg = TrainConfig {
                epochs: 12, lr: 0.01, momentum: 0.9, weight_decay: 1e-4,
                gamma: 1e-3, obj_pos_weight: 10.0, lr_step_epoch: 9, lr_step_factor: 0.1,
            };
            let model = Model::new(ModelConfig { use_rsr: false, use_dfs: false, ..ModelConfig::default() }, 0).unwrap();
            let mut opt = Sgd::new(&model.params(), tcfg.lr, tcfg.momentum, tcfg.weight_decay);
            let mut last = (0.0, 0.0, 0.0);
            train_model(&model, train, &tcfg, 0, 0, &mut opt, |_, r| {
                last = (r.l_det_obj, r.l_det_cls, r.l_det_reg);
            }).unwrap();
            let m = evaluate_model(&model, eval, &cfg.eval_config().unwrap()).unwrap();
            let dets = detect_scenes(&model, eval, &cfg.eval_config().unwrap());
            let mut lines = format!(
                "{name}: mAP50={:.3} mAP={:.3} MR2={:.3} obj={:.3} cls={:.3} reg={:.3}\n",
                m.map50, m.map, m.mr2, last.0, last.1, last.2
            );
            for si in 0..2 {
                lines.push_str(&format!("  scene{si} gts: "));
                for b in &eval[si].boxes {
                    lines.push_str(&format!("[c{} {:.0},{:.0},{:.0},{:.0}] ", b.class_id, b.x1, b.y1, b.x2, b.y2));
                }
                lines.push_str("\n  dets: ");
                for d in dets[si].iter().take(4) {
                    lines.push_str(&format!("[c{} s={:.2} {:.0},{:.0},{:.0},{:.0}] ", d.class_id, d.score, d.x1, d.y1, d.x2, d.y2));
                }
                lines.push('\n');
            }
            lines
        })
        .collect();
    for r in results {
        println!("{r}");
    }
}
