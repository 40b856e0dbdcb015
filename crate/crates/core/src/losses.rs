//! Training objective: shared/specific mutual-information surrogate
//! plus the toy detection losses, combined as
//! `gamma * (L_i_spe + L_v_spe) + L_obj + L_reg + L_cls`.
//!
//! The surrogate is `CE(p,q) - KL(p||q) + CE(q,p) - KL(q||p)`, computed
//! term by term exactly as written; algebraically this equals
//! `H(p) + H(q)`, and the test suite pins that identity rather than
//! simplifying the implementation.

use crate::detect::{GridTarget, HeadOutput};
use crate::tensor::{sigmoid, Tensor};

/// Scalar summary of one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub l_i_spe: f64,
    pub l_v_spe: f64,
    pub l_det_obj: f64,
    pub l_det_cls: f64,
    pub l_det_reg: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(
        l_i_spe: f64,
        l_v_spe: f64,
        l_det_obj: f64,
        l_det_cls: f64,
        l_det_reg: f64,
        gamma: f64,
        total: f64,
    ) -> LossReport {
        let reassembled = gamma * (l_i_spe + l_v_spe) + l_det_obj + l_det_cls + l_det_reg;
        assert!(
            (total - reassembled).abs() < 1e-12,
            "loss report does not reassemble: {total} vs {reassembled}"
        );
        assert!(total.is_finite(), "non-finite total loss");
        LossReport {
            l_i_spe,
            l_v_spe,
            l_det_obj,
            l_det_cls,
            l_det_reg,
            gamma,
            total,
        }
    }

    pub const CSV_HEADER: &'static str =
        "step,l_i_spe,l_v_spe,l_det_obj,l_det_cls,l_det_reg,gamma,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_i_spe,
            self.l_v_spe,
            self.l_det_obj,
            self.l_det_cls,
            self.l_det_reg,
            self.gamma,
            self.total
        )
    }
}

/// Flatten and softmax into a strictly positive distribution.
pub fn feature_distribution(x: &Tensor) -> Tensor {
    x.flatten().softmax(0)
}

fn assert_normalized(p: &Tensor, name: &str) {
    let s = p.with_data(|d| d.iter().sum::<f64>());
    assert!(
        (s - 1.0).abs() < 1e-9,
        "{name} is not a distribution: sums to {s}"
    );
}

/// Cross entropy `-Σ p ln q`.
fn cross_entropy(p: &Tensor, q: &Tensor) -> Tensor {
    p.mul(&q.ln()).sum().neg()
}

/// KL divergence `Σ p ln(p/q)`.
fn kl_divergence(p: &Tensor, q: &Tensor) -> Tensor {
    p.mul(&p.ln().sub(&q.ln())).sum()
}

/// `CE(p,q) - KL(p||q) + CE(q,p) - KL(q||p)`; inputs must sum to 1
/// within 1e-9.
pub fn mi_surrogate(p: &Tensor, q: &Tensor) -> Tensor {
    assert_normalized(p, "p");
    assert_normalized(q, "q");
    cross_entropy(p, q)
        .sub(&kl_divergence(p, q))
        .add(&cross_entropy(q, p))
        .sub(&kl_divergence(q, p))
}

/// Shared/specific supervision terms. Each is the negated surrogate of
/// the pooled shared feature against one modality's fused feature, so
/// minimizing the total loss maximizes the surrogate.
pub fn shared_specific_losses(
    c_sha: &Tensor,
    c_i_spe_fused: &Tensor,
    c_v_spe_fused: &Tensor,
) -> (Tensor, Tensor) {
    let p_sha = feature_distribution(&c_sha.global_avgpool());
    let p_i = feature_distribution(&c_i_spe_fused.global_avgpool());
    let p_v = feature_distribution(&c_v_spe_fused.global_avgpool());
    (
        mi_surrogate(&p_sha, &p_i).neg(),
        mi_surrogate(&p_sha, &p_v).neg(),
    )
}

/// `gamma*(l_i + l_v) + l_obj + l_reg + l_cls`, on the tape.
pub fn total_loss(
    l_i_spe: &Tensor,
    l_v_spe: &Tensor,
    l_det_obj: &Tensor,
    l_det_reg: &Tensor,
    l_det_cls: &Tensor,
    gamma: f64,
) -> Tensor {
    l_i_spe
        .add(l_v_spe)
        .scale(gamma)
        .add(l_det_obj)
        .add(l_det_reg)
        .add(l_det_cls)
}

/// Mean binary cross entropy with logits; positive targets are
/// up-weighted by `pos_weight`.
pub fn bce_with_logits_mean(logits: &Tensor, targets: &[f64], pos_weight: f64) -> Tensor {
    let n = logits.len();
    assert_eq!(targets.len(), n, "bce target length");
    let targets = targets.to_vec();
    let total = logits.with_data(|z| {
        let mut s = 0.0;
        for i in 0..n {
            let w = if targets[i] == 1.0 { pos_weight } else { 1.0 };
            s += w * (z[i].max(0.0) - z[i] * targets[i] + (-z[i].abs()).exp().ln_1p());
        }
        s / n as f64
    });
    Tensor::from_op(vec![1], vec![total], vec![logits.clone()], move |ctx| {
        let z = ctx.parents[0].data_ref();
        ctx.parents[0].accumulate_grad(|g| {
            let inv = ctx.grad[0] / n as f64;
            for i in 0..n {
                let w = if targets[i] == 1.0 { pos_weight } else { 1.0 };
                g[i] += inv * w * (sigmoid(z[i]) - targets[i]);
            }
        });
    })
}

/// Weighted smooth-L1 (beta = 1): quadratic inside the unit residual,
/// linear outside; normalized by the weight mass (or 1 when empty).
pub fn smooth_l1_weighted_mean(pred: &Tensor, target: &[f64], weights: &[f64]) -> Tensor {
    let n = pred.len();
    assert_eq!(target.len(), n, "smooth_l1 target length");
    assert_eq!(weights.len(), n, "smooth_l1 weight length");
    let target = target.to_vec();
    let weights = weights.to_vec();
    let mass: f64 = weights.iter().sum::<f64>().max(1.0);
    let total = pred.with_data(|p| {
        let mut s = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let d = p[i] - target[i];
            let h = if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
            s += weights[i] * h;
        }
        s / mass
    });
    Tensor::from_op(vec![1], vec![total], vec![pred.clone()], move |ctx| {
        let p = ctx.parents[0].data_ref();
        ctx.parents[0].accumulate_grad(|g| {
            let inv = ctx.grad[0] / mass;
            for i in 0..n {
                if weights[i] == 0.0 {
                    continue;
                }
                let d = p[i] - target[i];
                g[i] += inv * weights[i] * d.clamp(-1.0, 1.0);
            }
        });
    })
}

/// Detection losses against a rasterized target:
/// objectness BCE over all cells, one-vs-all class BCE and smooth-L1
/// offsets on positive cells.
pub fn detection_losses(
    head: &HeadOutput,
    target: &GridTarget,
    classes: usize,
    obj_pos_weight: f64,
) -> (Tensor, Tensor, Tensor) {
    let n = target.size * target.size;
    let l_obj = bce_with_logits_mean(&head.objectness.flatten(), &target.objectness, obj_pos_weight);

    let mut cls_targets = vec![0.0; classes * n];
    let mut cls_weights = vec![0.0; classes * n];
    for cell in 0..n {
        if target.objectness[cell] == 1.0 {
            for c in 0..classes {
                cls_weights[c * n + cell] = 1.0;
                if target.class_id[cell] == c {
                    cls_targets[c * n + cell] = 1.0;
                }
            }
        }
    }
    let l_cls = weighted_bce(&head.class_logits.flatten(), &cls_targets, &cls_weights);

    let mut reg_weights = vec![0.0; 4 * n];
    for cell in 0..n {
        if target.objectness[cell] == 1.0 {
            for k in 0..4 {
                reg_weights[k * n + cell] = 1.0;
            }
        }
    }
    let l_reg = smooth_l1_weighted_mean(&head.offsets.flatten(), &target.offsets, &reg_weights);

    (l_obj, l_cls, l_reg)
}

/// BCE with per-entry weights, normalized by weight mass (or 1).
fn weighted_bce(logits: &Tensor, targets: &[f64], weights: &[f64]) -> Tensor {
    let n = logits.len();
    assert_eq!(targets.len(), n);
    assert_eq!(weights.len(), n);
    let targets = targets.to_vec();
    let weights = weights.to_vec();
    let mass: f64 = weights.iter().sum::<f64>().max(1.0);
    let total = logits.with_data(|z| {
        let mut s = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            s += weights[i] * (z[i].max(0.0) - z[i] * targets[i] + (-z[i].abs()).exp().ln_1p());
        }
        s / mass
    });
    Tensor::from_op(vec![1], vec![total], vec![logits.clone()], move |ctx| {
        let z = ctx.parents[0].data_ref();
        ctx.parents[0].accumulate_grad(|g| {
            let inv = ctx.grad[0] / mass;
            for i in 0..n {
                if weights[i] == 0.0 {
                    continue;
                }
                g[i] += inv * weights[i] * (sigmoid(z[i]) - targets[i]);
            }
        });
    })
}
