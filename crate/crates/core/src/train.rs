//! Training loop, checkpointing, evaluation, the SNR audit, and the
//! four-variant ablation matrix.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::{EvalConfig, TrainConfig};
use crate::data::{Corpus, Scene};
use crate::detect::{assign_targets, decode, BBox};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LossReport};
use crate::model::{Model, ModelConfig};
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Salt for the per-epoch shuffle stream, so data order is a pure
/// function of (seed, epoch) and resume stays bit-identical.
const SHUFFLE_SALT: u64 = 0x5ce5_a11d;

/// One optimization step on one scene; returns the loss report.
fn train_step(
    model: &Model,
    scene: &Scene,
    cfg: &TrainConfig,
    opt: &mut Sgd,
) -> Result<LossReport> {
    let v = scene.tensor_v();
    let i = scene.tensor_i();
    let trace = model.forward(&v, &i, true);
    let head = model.head.forward(&trace.fused);
    let grid = trace.fused.dims()[1];
    let target = assign_targets(&scene.boxes, grid, scene.size, scene.size);

    let (l_i, l_v) =
        losses::shared_specific_losses(&trace.c_sha, &trace.dfs.fused_i, &trace.dfs.fused_v);
    let (l_obj, l_cls, l_reg) =
        losses::detection_losses(&head, &target, model.cfg.classes, cfg.obj_pos_weight);
    let total = losses::total_loss(&l_i, &l_v, &l_obj, &l_reg, &l_cls, cfg.gamma);

    let report = LossReport::new(
        l_i.item(),
        l_v.item(),
        l_obj.item(),
        l_cls.item(),
        l_reg.item(),
        cfg.gamma,
        total.item(),
    );
    if !report.total.is_finite() {
        return Err(Error::numeric(format!(
            "training diverged: total loss {}",
            report.total
        )));
    }

    total.backward();
    opt.step(&model.params());
    opt.zero_grad(&model.params());
    Ok(report)
}

/// Train for `cfg.epochs`, starting at `start_epoch` (0-based) so a
/// resumed run replays the identical shuffle streams.
pub fn train_model(
    model: &Model,
    train_scenes: &[Scene],
    cfg: &TrainConfig,
    seed: u64,
    start_epoch: usize,
    opt: &mut Sgd,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<()> {
    if train_scenes.is_empty() {
        return Err(Error::data("no training scenes"));
    }
    let base_lr = cfg.lr;
    let n = train_scenes.len();
    for epoch in start_epoch..cfg.epochs {
        opt.lr = if cfg.lr_step_epoch > 0 && epoch + 1 >= cfg.lr_step_epoch {
            base_lr * cfg.lr_step_factor
        } else {
            base_lr
        };
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(seed ^ SHUFFLE_SALT, epoch as u64).shuffle(&mut order);
        for (k, &idx) in order.iter().enumerate() {
            let report = train_step(model, &train_scenes[idx], cfg, opt)?;
            on_step(epoch * n + k, &report);
        }
    }
    Ok(())
}

/// Model parameters + optimizer velocity + epoch counter, keyed by name.
pub fn checkpoint_entries(model: &Model, opt: &Sgd, epoch: usize) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    let params = model.params();
    for p in &params {
        map.insert(p.name.clone(), Tensor::new(p.tensor.dims(), p.tensor.to_vec()));
    }
    for (p, v) in params.iter().zip(opt.velocity()) {
        map.insert(
            format!("optim.{}.v", p.name),
            Tensor::new(p.tensor.dims(), v.clone()),
        );
    }
    map.insert("meta.epoch".to_string(), Tensor::scalar(epoch as f64));
    map
}

/// Restore a checkpoint into a freshly-built model + optimizer.
/// Returns the stored epoch. Name mismatches list what is missing and
/// what was unexpected.
pub fn restore_checkpoint(
    model: &Model,
    opt: &mut Sgd,
    entries: &BTreeMap<String, Tensor>,
) -> Result<usize> {
    let mut param_entries = BTreeMap::new();
    let mut velocity_entries: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut epoch = 0usize;
    for (k, t) in entries {
        if let Some(stripped) = k.strip_prefix("optim.") {
            let name = stripped
                .strip_suffix(".v")
                .ok_or_else(|| Error::data(format!("malformed optimizer entry '{k}'")))?;
            velocity_entries.insert(name.to_string(), t.clone());
        } else if k == "meta.epoch" {
            epoch = t.item() as usize;
        } else {
            param_entries.insert(k.clone(), t.clone());
        }
    }
    let params = model.params();
    crate::io::load_params(&params, &param_entries)?;
    let mut velocity = Vec::with_capacity(params.len());
    for p in &params {
        let v = velocity_entries.get(&p.name).ok_or_else(|| {
            Error::data(format!("checkpoint lacks optimizer state for '{}'", p.name))
        })?;
        velocity.push(v.to_vec());
    }
    opt.set_velocity(velocity);
    Ok(epoch)
}

/// Restore only the model parameters from a checkpoint map, ignoring
/// optimizer state and metadata (for evaluation and visualization).
pub fn load_model_params(model: &Model, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let param_entries: BTreeMap<String, Tensor> = entries
        .iter()
        .filter(|(k, _)| !k.starts_with("optim.") && !k.starts_with("meta."))
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    crate::io::load_params(&model.params(), &param_entries)
}

/// Per-corpus evaluation metrics.
#[derive(Clone, Debug)]
pub struct Metrics {
    pub map50: f64,
    pub map75: f64,
    pub map: f64,
    pub mr2: f64,
    pub per_class_ap50: Vec<(usize, f64)>,
}

impl Metrics {
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("mAP50,{}\n", self.map50));
        out.push_str(&format!("mAP75,{}\n", self.map75));
        out.push_str(&format!("mAP,{}\n", self.map));
        out.push_str(&format!("MR-2,{}\n", self.mr2));
        for (c, ap) in &self.per_class_ap50 {
            out.push_str(&format!("AP50_class{c},{ap}\n"));
        }
        out
    }
}

/// Detections for every scene at the configured decode settings.
pub fn detect_scenes(model: &Model, scenes: &[Scene], cfg: &EvalConfig) -> Vec<Vec<BBox>> {
    scenes
        .iter()
        .map(|scene| {
            let trace = model.forward(&scene.tensor_v(), &scene.tensor_i(), false);
            let head = model.head.forward(&trace.fused);
            let grid = trace.fused.dims()[1];
            decode(
                &head.objectness.to_vec(),
                &head.offsets.to_vec(),
                &head.class_logits.to_vec(),
                model.cfg.classes,
                grid,
                scene.size,
                scene.size,
                cfg.score_threshold,
                cfg.nms_iou,
            )
        })
        .collect()
}

pub fn evaluate_model(model: &Model, scenes: &[Scene], cfg: &EvalConfig) -> Result<Metrics> {
    let dets = detect_scenes(model, scenes, cfg);
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let map50 = eval::mean_average_precision(&dets, &gts, 0.5);
    let map75 = eval::mean_average_precision(&dets, &gts, 0.75);
    let map = eval::map_over_thresholds(&dets, &gts);
    let mr2 = eval::log_average_miss_rate(&dets, &gts, 0.5)?;
    let per_class_ap50 = eval::gt_classes(&gts)
        .into_iter()
        .map(|c| (c, eval::average_precision(&dets, &gts, c, 0.5)))
        .collect();
    Ok(Metrics {
        map50,
        map75,
        map,
        mr2,
        per_class_ap50,
    })
}

/// SNR of the noisy input and of the cleaned output against the clean
/// reference, averaged over both modalities, for one scene.
pub fn scene_snr_delta(model: &Model, scene: &Scene) -> Option<(f64, f64)> {
    let rsr_v = model.rsr_v.as_ref()?;
    let rsr_i = model.rsr_i.as_ref()?;
    let v = scene.tensor_v();
    let i = scene.tensor_i();
    let clean_v = scene.clean_tensor_v();
    let clean_i = scene.clean_tensor_i();
    let snr_in = 0.5 * (eval::snr_db(&v, &clean_v) + eval::snr_db(&i, &clean_i));
    if !snr_in.is_finite() {
        return None; // noise-free scene: nothing to clean
    }
    let out_v = rsr_v.apply(&v).cleaned;
    let out_i = rsr_i.apply(&i).cleaned;
    let snr_out = 0.5 * (eval::snr_db(&out_v, &clean_v) + eval::snr_db(&out_i, &clean_i));
    Some((snr_in, snr_out))
}

/// Mean SNR improvement of the coarse stage over a scene set.
pub fn snr_audit(model: &Model, scenes: &[Scene]) -> Vec<(f64, f64)> {
    scenes
        .iter()
        .filter_map(|s| scene_snr_delta(model, s))
        .collect()
}

/// Ablation variants in table order: (name, use_rsr, use_dfs).
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("rsr", true, false),
    ("dfs", false, true),
    ("both", true, true),
];

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub map50: f64,
    pub map: f64,
    pub mr2: f64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub n_seeds: usize,
    pub map50_mean: f64,
    pub map50_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub mr2_mean: f64,
    pub mr2_std: f64,
}

/// Train and evaluate every (variant, seed) cell. Cells run in
/// parallel; each builds its own model and optimizer, so results are
/// independent of scheduling.
pub fn run_ablation(
    corpus: &Corpus,
    base_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    train_fraction: f64,
    seeds: &[u64],
) -> Result<Vec<AblationCell>> {
    let (train_scenes, eval_scenes) = corpus.split(train_fraction);
    let jobs: Vec<(usize, u64)> = (0..ABLATION_VARIANTS.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(vi, seed)| {
            let (name, use_rsr, use_dfs) = ABLATION_VARIANTS[vi];
            let cfg = ModelConfig {
                use_rsr,
                use_dfs,
                ..base_cfg.clone()
            };
            let model = Model::new(cfg, seed)?;
            let mut opt = Sgd::new(
                &model.params(),
                train_cfg.lr,
                train_cfg.momentum,
                train_cfg.weight_decay,
            );
            train_model(&model, train_scenes, train_cfg, seed, 0, &mut opt, |_, _| {})?;
            let metrics = evaluate_model(&model, eval_scenes, eval_cfg)?;
            Ok(AblationCell {
                variant: name.to_string(),
                seed,
                map50: metrics.map50,
                map: metrics.map,
                mr2: metrics.mr2,
            })
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize_ablation(cells: &[AblationCell]) -> Vec<AblationRow> {
    ABLATION_VARIANTS
        .iter()
        .map(|(name, _, _)| {
            let vs: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == *name).collect();
            let (map50_mean, map50_std) =
                mean_std(&vs.iter().map(|c| c.map50).collect::<Vec<_>>());
            let (map_mean, map_std) = mean_std(&vs.iter().map(|c| c.map).collect::<Vec<_>>());
            let (mr2_mean, mr2_std) = mean_std(&vs.iter().map(|c| c.mr2).collect::<Vec<_>>());
            AblationRow {
                variant: name.to_string(),
                n_seeds: vs.len(),
                map50_mean,
                map50_std,
                map_mean,
                map_std,
                mr2_mean,
                mr2_std,
            }
        })
        .collect()
}

pub fn ablation_summary_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant,n_seeds,map50_mean,map50_std,map_mean,map_std,mr2_mean,mr2_std\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.n_seeds,
            r.map50_mean,
            r.map50_std,
            r.map_mean,
            r.map_std,
            r.mr2_mean,
            r.mr2_std
        ));
    }
    out
}

pub fn ablation_cells_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("variant,seed,map50,map,mr2\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.variant, c.seed, c.map50, c.map, c.mr2
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn tiny_corpus(count: usize, size: usize, seed: u64) -> Corpus {
        let mut cfg = Config::default();
        cfg.set("data.count", count);
        cfg.set("data.size", size);
        crate::data::generate_corpus(&cfg.data_config().unwrap(), seed).unwrap()
    }

    fn quick_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            gamma: 1e-3,
            obj_pos_weight: 4.0,
            lr_step_epoch: 0,
            lr_step_factor: 0.1,
        }
    }

    #[test]
    fn loss_decreases_over_first_50_steps() {
        let corpus = tiny_corpus(10, 64, 1);
        let model = Model::new(ModelConfig::default(), 3).unwrap();
        let cfg = quick_train_cfg(5);
        let mut opt = Sgd::new(&model.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
        let mut reports = Vec::new();
        train_model(&model, &corpus.scenes, &cfg, 3, 0, &mut opt, |_, r| {
            reports.push(*r);
        })
        .unwrap();
        let head: f64 = reports[..5].iter().map(|r| r.total).sum::<f64>() / 5.0;
        let idx = 45.min(reports.len() - 5);
        let tail: f64 = reports[idx..idx + 5].iter().map(|r| r.total).sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "loss did not decrease: first5 {head:.4}, around step 50 {tail:.4}"
        );
        assert!(reports.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn resume_is_bit_identical_to_uninterrupted() {
        let corpus = tiny_corpus(6, 32, 2);
        let cfg = quick_train_cfg(2);

        // uninterrupted: 2 epochs
        let model_a = Model::new(ModelConfig::default(), 9).unwrap();
        let mut opt_a = Sgd::new(&model_a.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
        train_model(&model_a, &corpus.scenes, &cfg, 9, 0, &mut opt_a, |_, _| {}).unwrap();

        // interrupted: 1 epoch, checkpoint, rebuild, resume
        let one = TrainConfig { epochs: 1, ..cfg };
        let model_b = Model::new(ModelConfig::default(), 9).unwrap();
        let mut opt_b = Sgd::new(&model_b.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
        train_model(&model_b, &corpus.scenes, &one, 9, 0, &mut opt_b, |_, _| {}).unwrap();
        let saved = checkpoint_entries(&model_b, &opt_b, 1);

        let model_c = Model::new(ModelConfig::default(), 9).unwrap();
        let mut opt_c = Sgd::new(&model_c.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
        let epoch = restore_checkpoint(&model_c, &mut opt_c, &saved).unwrap();
        assert_eq!(epoch, 1);
        train_model(&model_c, &corpus.scenes, &cfg, 9, epoch, &mut opt_c, |_, _| {}).unwrap();

        for (pa, pc) in model_a.params().iter().zip(model_c.params().iter()) {
            let a = pa.tensor.to_vec();
            let c = pc.tensor.to_vec();
            assert!(
                a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()),
                "parameter '{}' diverged after resume",
                pa.name
            );
        }
    }

    #[test]
    fn checkpoint_mismatch_lists_names() {
        let corpus = tiny_corpus(2, 32, 3);
        let _ = corpus;
        let full = Model::new(ModelConfig::default(), 1).unwrap();
        let opt = Sgd::new(&full.params(), 0.01, 0.9, 0.0);
        let entries = checkpoint_entries(&full, &opt, 0);

        let base = Model::new(
            ModelConfig {
                use_rsr: false,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let mut opt_b = Sgd::new(&base.params(), 0.01, 0.9, 0.0);
        match restore_checkpoint(&base, &mut opt_b, &entries) {
            Err(Error::CheckpointMismatch { unexpected, .. }) => {
                assert!(unexpected.iter().any(|n| n.starts_with("rsr_")));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_runs_on_untrained_model() {
        let corpus = tiny_corpus(4, 64, 4);
        let model = Model::new(ModelConfig::default(), 5).unwrap();
        let m = evaluate_model(
            &model,
            &corpus.scenes,
            &EvalConfig {
                score_threshold: 0.05,
                nms_iou: 0.5,
            },
        )
        .unwrap();
        assert!(m.map50 >= 0.0 && m.map50 <= 1.0);
        assert!(m.mr2 >= 0.0 && m.mr2 <= 1.0);
        assert!(m.map50 >= m.map - 1e-12 || m.map <= m.map50 + 1e-9);
    }

    #[test]
    fn snr_audit_skips_clean_scenes() {
        let mut cfg = Config::default();
        cfg.set("data.count", 3);
        cfg.set("data.size", 64);
        cfg.set("data.noise", "off");
        let corpus = crate::data::generate_corpus(&cfg.data_config().unwrap(), 5).unwrap();
        let model = Model::new(ModelConfig::default(), 6).unwrap();
        assert!(snr_audit(&model, &corpus.scenes).is_empty());
    }

    #[test]
    fn gamma_propagates_into_reports() {
        let corpus = tiny_corpus(2, 32, 7);
        let model = Model::new(ModelConfig::default(), 8).unwrap();
        let cfg = TrainConfig {
            gamma: 0.25,
            epochs: 1,
            ..quick_train_cfg(1)
        };
        let mut opt = Sgd::new(&model.params(), cfg.lr, cfg.momentum, cfg.weight_decay);
        let mut seen = Vec::new();
        train_model(&model, &corpus.scenes, &cfg, 8, 0, &mut opt, |_, r| {
            seen.push(r.gamma);
        })
        .unwrap();
        assert!(seen.iter().all(|&g| g == 0.25));
    }
}
