//! Dynamic feature selection: per-scale 2-way gating over the modality
//! features, threshold routing into binary pass/block gates, scale-aware
//! expert networks, and weighted fusion into the specific feature.
//!
//! Routing is inherently discrete; training keeps it differentiable
//! with a straight-through rule (forward 0/1, backward identity on the
//! gate weight). The rule is switchable so finite-difference checks can
//! run against the true local gradient of the forward pass.

use crate::backbone::ScaleFeatureSet;
use crate::error::{Error, Result};
use crate::nn::ConvNormAct;
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

/// One scale's gating outcome.
#[derive(Clone, Copy, Debug)]
pub struct GateDecision {
    pub scale: usize,
    /// Softmax weights (infrared, visible); they sum to 1.
    pub w_i: f64,
    pub w_v: f64,
    /// Binary routing gates; never both closed for thresholds <= 0.5.
    pub r_i: bool,
    pub r_v: bool,
}

#[derive(Clone, Debug)]
pub struct DfsConfig {
    /// Router threshold t in (0, 0.5].
    pub threshold: f64,
    /// Expert output channels (each scale contributes this many).
    pub expert_channels: usize,
}

impl Default for DfsConfig {
    fn default() -> DfsConfig {
        DfsConfig {
            threshold: 0.3,
            expert_channels: 8,
        }
    }
}

impl DfsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 0.5) {
            return Err(Error::data(format!(
                "dfs.threshold must lie in (0, 0.5], got {}",
                self.threshold
            )));
        }
        if self.expert_channels < 1 {
            return Err(Error::data("dfs.expert_channels must be >= 1"));
        }
        Ok(())
    }
}

/// Three-case router. Boundary weights equal to `t` count as open; the
/// first matching case wins, so (t, t) opens both gates.
pub fn route(w_i: f64, w_v: f64, t: f64) -> (bool, bool) {
    assert!(t > 0.0 && t <= 0.5, "router threshold {t} outside (0, 0.5]");
    if w_i >= t && w_v >= t {
        (true, true)
    } else if w_i >= t && w_v <= t {
        (true, false)
    } else {
        (false, true)
    }
}

/// Per-scale gating matrix: pooled features of both modalities,
/// concatenated, times a (2M)x2 matrix, softmaxed.
pub struct ScaleGate {
    pub w: Parameter,
}

impl ScaleGate {
    pub fn new(prefix: &str, feature_channels: usize, rng: &mut Rng) -> ScaleGate {
        let rows = 2 * feature_channels;
        ScaleGate {
            w: Parameter::new(
                format!("{prefix}.w"),
                &[rows, 2],
                crate::nn::kaiming_uniform(rng, rows, rows * 2),
            ),
        }
    }

    /// Gate weights `[w_i, w_v]` for one scale's feature pair.
    pub fn forward(&self, feat_i: &Tensor, feat_v: &Tensor) -> Tensor {
        assert!(
            feat_i.dims() == feat_v.dims(),
            "gate inputs differ: {:?} vs {:?}",
            feat_i.dims(),
            feat_v.dims()
        );
        let pooled_i = feat_i.global_avgpool();
        let pooled_v = feat_v.global_avgpool();
        let m = pooled_i.len();
        assert!(
            self.w.tensor.dims() == [2 * m, 2],
            "gate matrix {:?} incompatible with pooled length {}",
            self.w.tensor.dims(),
            m
        );
        concat_vectors(&pooled_i, &pooled_v)
            .reshape(&[1, 2 * m])
            .matmul(&self.w.tensor)
            .softmax(1)
            .reshape(&[2])
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.w.clone()]
    }
}

fn concat_vectors(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = (a.len(), b.len());
    let mut data = a.to_vec();
    data.extend(b.to_vec());
    Tensor::from_op(
        vec![n + m],
        data,
        vec![a.clone(), b.clone()],
        move |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for (gi, &d) in g.iter_mut().zip(&ctx.grad[..n]) {
                    *gi += d;
                }
            });
            ctx.parents[1].accumulate_grad(|g| {
                for (gi, &d) in g.iter_mut().zip(&ctx.grad[n..]) {
                    *gi += d;
                }
            });
        },
    )
}

/// Multiply a feature map by a binary routing gate derived from
/// `weights[index]`.
///
/// Forward: `x` if the gate is open, zeros otherwise. Backward: the
/// open/closed factor on the feature path; with `straight_through`, the
/// gate additionally passes `sum(dy .* x)` into the weight as if the
/// 0/1 step were the identity.
pub fn gate_mul(x: &Tensor, weights: &Tensor, index: usize, open: bool, straight_through: bool) -> Tensor {
    let data = if open {
        x.to_vec()
    } else {
        vec![0.0; x.len()]
    };
    Tensor::from_op(
        x.dims().to_vec(),
        data,
        vec![x.clone(), weights.clone()],
        move |ctx| {
            if open {
                ctx.parents[0].accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                        *gi += d;
                    }
                });
            }
            if straight_through {
                let xv = ctx.parents[0].data_ref();
                let dot: f64 = ctx.grad.iter().zip(xv.iter()).map(|(d, v)| d * v).sum();
                ctx.parents[1].accumulate_grad(|g| g[index] += dot);
            }
        },
    )
}

/// Two conv blocks projecting a scale's features to the common expert width.
pub struct Expert {
    pub block1: ConvNormAct,
    pub block2: ConvNormAct,
}

impl Expert {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> Expert {
        Expert {
            block1: ConvNormAct::new(&format!("{prefix}.block1"), c_in, c_out, 3, rng),
            block2: ConvNormAct::new(&format!("{prefix}.block2"), c_out, c_out, 3, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.block2.forward(&self.block1.forward(x))
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.block1.params();
        p.extend(self.block2.params());
        p
    }
}

/// Everything the fine stage produces in one pass.
pub struct DfsOutput {
    /// Fused specific feature, `[N*C_e, S, S]`.
    pub c_spe: Tensor,
    pub decisions: Vec<GateDecision>,
    /// Per-modality concatenated expert features (same layout as c_spe),
    /// used by the shared/specific supervision.
    pub fused_i: Tensor,
    pub fused_v: Tensor,
    /// Raw per-scale expert outputs (infrared, visible), for inspection.
    pub expert_i: Vec<Tensor>,
    pub expert_v: Vec<Tensor>,
}

/// The fine stage. When `gates` is `None` the module degrades to fixed
/// equal-weight addition fusion (the ablation baseline): both gates
/// open, w_i = w_v = 0.5, no gating parameters.
pub struct DfsModule {
    pub cfg: DfsConfig,
    pub gates: Option<Vec<ScaleGate>>,
    pub experts_i: Vec<Expert>,
    pub experts_v: Vec<Expert>,
    /// Common fusion extent = spatial size of scale index 1.
    fuse_scale_index: usize,
}

impl DfsModule {
    pub fn new(
        prefix: &str,
        cfg: DfsConfig,
        scale_channels: &[usize],
        dynamic: bool,
        rng: &mut Rng,
    ) -> DfsModule {
        let gates = if dynamic {
            Some(
                scale_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| ScaleGate::new(&format!("{prefix}.gate{i}"), c, rng))
                    .collect(),
            )
        } else {
            None
        };
        let experts_i = scale_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Expert::new(&format!("{prefix}.expert_i{i}"), c, cfg.expert_channels, rng))
            .collect();
        let experts_v = scale_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Expert::new(&format!("{prefix}.expert_v{i}"), c, cfg.expert_channels, rng))
            .collect();
        DfsModule {
            cfg,
            gates,
            experts_i,
            experts_v,
            fuse_scale_index: 1,
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = Vec::new();
        if let Some(gates) = &self.gates {
            for g in gates {
                p.extend(g.params());
            }
        }
        for e in &self.experts_i {
            p.extend(e.params());
        }
        for e in &self.experts_v {
            p.extend(e.params());
        }
        p
    }

    /// Fine pass over the two modality feature pyramids.
    pub fn forward(
        &self,
        feats_i: &ScaleFeatureSet,
        feats_v: &ScaleFeatureSet,
        straight_through: bool,
    ) -> DfsOutput {
        let n = self.experts_i.len();
        assert!(
            feats_i.num_scales() == n && feats_v.num_scales() == n,
            "expected {n} scales, got {} (infrared) / {} (visible)",
            feats_i.num_scales(),
            feats_v.num_scales()
        );
        let target = feats_i.scales[self.fuse_scale_index.min(n - 1)].dims();
        let (s_h, s_w) = (target[1], target[2]);

        let mut decisions = Vec::with_capacity(n);
        let mut per_scale = Vec::with_capacity(n);
        let mut fused_i_parts = Vec::with_capacity(n);
        let mut fused_v_parts = Vec::with_capacity(n);
        let mut expert_i_raw = Vec::with_capacity(n);
        let mut expert_v_raw = Vec::with_capacity(n);

        for s in 0..n {
            let x_i = &feats_i.scales[s];
            let x_v = &feats_v.scales[s];
            let (weights, decision) = match &self.gates {
                Some(gates) => {
                    let w = gates[s].forward(x_i, x_v);
                    let wv = w.to_vec();
                    let (r_i, r_v) = route(wv[0], wv[1], self.cfg.threshold);
                    (
                        w,
                        GateDecision {
                            scale: s,
                            w_i: wv[0],
                            w_v: wv[1],
                            r_i,
                            r_v,
                        },
                    )
                }
                None => (
                    Tensor::new(&[2], vec![0.5, 0.5]),
                    GateDecision {
                        scale: s,
                        w_i: 0.5,
                        w_v: 0.5,
                        r_i: true,
                        r_v: true,
                    },
                ),
            };

            let gated_i = gate_mul(x_i, &weights, 0, decision.r_i, straight_through);
            let gated_v = gate_mul(x_v, &weights, 1, decision.r_v, straight_through);
            let c_i = self.experts_i[s].forward(&gated_i);
            let c_v = self.experts_v[s].forward(&gated_v);

            let blended = c_i
                .scale_by_entry(&weights, 0)
                .add(&c_v.scale_by_entry(&weights, 1))
                .resize_nearest(s_h, s_w);
            per_scale.push(blended);
            fused_i_parts.push(c_i.resize_nearest(s_h, s_w));
            fused_v_parts.push(c_v.resize_nearest(s_h, s_w));
            expert_i_raw.push(c_i);
            expert_v_raw.push(c_v);
            decisions.push(decision);
        }

        DfsOutput {
            c_spe: Tensor::concat_channels(&per_scale),
            decisions,
            fused_i: Tensor::concat_channels(&fused_i_parts),
            fused_v: Tensor::concat_channels(&fused_v_parts),
            expert_i: expert_i_raw,
            expert_v: expert_v_raw,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::zero_params;

    fn feature(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn zero_gate_matrix_gives_even_weights() {
        let mut rng = Rng::new(1);
        let gate = ScaleGate::new("g", 4, &mut rng);
        zero_params(&gate.params());
        let a = feature(2, 4, 8, 8);
        let b = feature(3, 4, 8, 8);
        let w = gate.forward(&a, &b).to_vec();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn gate_weights_sum_to_one() {
        let mut rng = Rng::new(4);
        let gate = ScaleGate::new("g", 6, &mut rng);
        for seed in 0..10 {
            let a = feature(100 + seed, 6, 4, 4);
            let b = feature(200 + seed, 6, 4, 4);
            let w = gate.forward(&a, &b).to_vec();
            assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
            assert!(w[0] >= 0.0 && w[1] >= 0.0);

            let ws = gate.forward(&a.scale(3.7), &b.scale(3.7)).to_vec();
            assert!((ws[0] + ws[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn router_case_table() {
        assert_eq!(route(0.5, 0.5, 0.3), (true, true));
        assert_eq!(route(0.9, 0.1, 0.3), (true, false));
        assert_eq!(route(0.2, 0.8, 0.3), (false, true));
        // boundary counts as open; first case wins at exactly (t, 1-t)
        assert_eq!(route(0.3, 0.7, 0.3), (true, true));
        assert_eq!(route(0.7, 0.3, 0.3), (true, true));
    }

    #[test]
    fn router_never_closes_both() {
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let w = rng.next_f64();
            for t in [0.1, 0.2, 0.3, 0.4, 0.5] {
                let (ri, rv) = route(w, 1.0 - w, t);
                assert!(ri || rv, "both gates closed at w={w}, t={t}");
            }
        }
    }

    #[test]
    fn router_is_swap_symmetric() {
        let mut rng = Rng::new(10);
        for _ in 0..1000 {
            let w = rng.next_f64();
            let t = rng.uniform(0.05, 0.5);
            let (a, b) = route(w, 1.0 - w, t);
            let (c, d) = route(1.0 - w, w, t);
            assert_eq!((a, b), (d, c));
        }
    }

    #[test]
    #[should_panic(expected = "outside (0, 0.5]")]
    fn router_rejects_bad_threshold() {
        let _ = route(0.5, 0.5, 0.6);
    }

    #[test]
    fn closed_gate_zero_bias_expert_gives_zero() {
        let mut rng = Rng::new(11);
        let expert = Expert::new("e", 3, 2, &mut rng);
        zero_params(&expert.params());
        let x = feature(12, 3, 8, 8);
        let w = Tensor::new(&[2], vec![0.1, 0.9]);
        let gated = gate_mul(&x, &w, 0, false, false);
        assert!(gated.to_vec().iter().all(|&v| v == 0.0));
        assert!(expert.forward(&gated).to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn open_gate_passes_raw_feature() {
        let x = feature(13, 2, 4, 4);
        let w = Tensor::new(&[2], vec![0.5, 0.5]);
        let gated = gate_mul(&x, &w, 1, true, true);
        assert_eq!(gated.to_vec(), x.to_vec());
    }

    #[test]
    fn expert_gradcheck() {
        for seed in 0..3 {
            let mut rng = Rng::new(20 + seed);
            let expert = Expert::new("e", 2, 2, &mut rng);
            let x = feature(30 + seed, 2, 4, 4);
            let probe = feature(40 + seed, 2, 4, 4).flatten();
            let params = expert.params();
            gradcheck::assert_param_grads_match(
                || expert.forward(&x).flatten().mul(&probe).sum(),
                &params,
                1e-3,
            );
        }
    }

    #[test]
    fn fuse_convexity_and_shapes() {
        let cfg = DfsConfig::default();
        let mut rng = Rng::new(50);
        let dfs = DfsModule::new("dfs", cfg, &[16, 32, 64, 128], true, &mut rng);
        let feats_i = ScaleFeatureSet {
            scales: vec![
                feature(60, 16, 32, 32),
                feature(61, 32, 16, 16),
                feature(62, 64, 8, 8),
                feature(63, 128, 4, 4),
            ],
        };
        let feats_v = ScaleFeatureSet {
            scales: vec![
                feature(70, 16, 32, 32),
                feature(71, 32, 16, 16),
                feature(72, 64, 8, 8),
                feature(73, 128, 4, 4),
            ],
        };
        let out = dfs.forward(&feats_i, &feats_v, true);
        assert_eq!(out.c_spe.dims(), &[32, 16, 16]);
        assert_eq!(out.decisions.len(), 4);
        for d in &out.decisions {
            assert!(d.r_i || d.r_v);
            assert!((d.w_i + d.w_v - 1.0).abs() < 1e-12);
        }

        // convexity: each fused cell lies within [min, max] of the two
        // expert outputs at that cell when both gates are open
        for s in 0..4 {
            let d = &out.decisions[s];
            if !(d.r_i && d.r_v) {
                continue;
            }
            let a = out.expert_i[s].to_vec();
            let b = out.expert_v[s].to_vec();
            let blend: Vec<f64> = a
                .iter()
                .zip(&b)
                .map(|(x, y)| d.w_i * x + d.w_v * y)
                .collect();
            for ((x, y), z) in a.iter().zip(&b).zip(&blend) {
                let (lo, hi) = (x.min(*y), x.max(*y));
                assert!(*z >= lo - 1e-12 && *z <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn identical_expert_outputs_make_weights_irrelevant() {
        // w*A + (1-w)*A = A for any softmax pair
        let a = feature(80, 2, 4, 4);
        let w = Tensor::new(&[2], vec![0.37, 0.63]);
        let blended = a.scale_by_entry(&w, 0).add(&a.scale_by_entry(&w, 1));
        let av = a.to_vec();
        let bv = blended.to_vec();
        for (x, y) in av.iter().zip(&bv) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn static_fusion_has_no_gate_params_and_even_weights() {
        let mut rng = Rng::new(90);
        let dfs = DfsModule::new("dfs", DfsConfig::default(), &[4, 8], false, &mut rng);
        assert!(dfs.gates.is_none());
        assert!(dfs.params().iter().all(|p| !p.name.contains("gate")));
        let feats_i = ScaleFeatureSet {
            scales: vec![feature(91, 4, 8, 8), feature(92, 8, 4, 4)],
        };
        let feats_v = ScaleFeatureSet {
            scales: vec![feature(93, 4, 8, 8), feature(94, 8, 4, 4)],
        };
        let out = dfs.forward(&feats_i, &feats_v, false);
        for d in out.decisions {
            assert_eq!((d.w_i, d.w_v), (0.5, 0.5));
            assert!(d.r_i && d.r_v);
        }
    }

    #[test]
    fn gradient_reaches_both_modalities_when_both_gates_open() {
        let mut rng = Rng::new(95);
        let dfs = DfsModule::new("dfs", DfsConfig { threshold: 0.3, expert_channels: 2 }, &[3, 4], true, &mut rng);
        let feats_i = ScaleFeatureSet {
            scales: vec![feature(96, 3, 8, 8), feature(97, 4, 4, 4)],
        };
        let feats_v = ScaleFeatureSet {
            scales: vec![feature(98, 3, 8, 8), feature(99, 4, 4, 4)],
        };
        let out = dfs.forward(&feats_i, &feats_v, true);
        assert!(out.decisions.iter().all(|d| d.r_i && d.r_v), "seed must open both gates");
        out.c_spe.sum().backward();
        for e in dfs.experts_i.iter().chain(&dfs.experts_v) {
            let nonzero = e
                .params()
                .iter()
                .any(|p| p.tensor.grad().map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false));
            assert!(nonzero, "an expert received no gradient");
        }
    }

    #[test]
    fn gate_gradcheck_without_straight_through() {
        // With STE off the analytic gradient is the true local gradient,
        // so FD must agree exactly (decisions stay fixed under ±h).
        for seed in 0..3 {
            let mut rng = Rng::new(400 + seed);
            let dfs = DfsModule::new(
                "dfs",
                DfsConfig { threshold: 0.3, expert_channels: 2 },
                &[2, 3],
                true,
                &mut rng,
            );
            let feats_i = ScaleFeatureSet {
                scales: vec![feature(500 + seed, 2, 8, 8), feature(510 + seed, 3, 4, 4)],
            };
            let feats_v = ScaleFeatureSet {
                scales: vec![feature(520 + seed, 2, 8, 8), feature(530 + seed, 3, 4, 4)],
            };
            let probe = feature(540 + seed, 4, 4, 4).flatten();
            let params = dfs.params();
            gradcheck::assert_param_grads_match(
                || {
                    dfs.forward(&feats_i, &feats_v, false)
                        .c_spe
                        .flatten()
                        .mul(&probe)
                        .sum()
                },
                &params,
                1e-3,
            );
        }
    }
}
