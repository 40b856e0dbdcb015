//! Central finite-difference gradient checking.
//!
//! The check perturbs each input entry by ±h, re-runs the forward
//! closure, and compares the difference quotient against the gradient
//! produced by [`crate::tensor::Tensor::backward`]. The forward closure
//! sees plain leaf tensors, so the oracle exercises only the value path.

use crate::tensor::{Parameter, Tensor};

/// Relative error with an absolute floor so near-zero gradients do not
/// amplify finite-difference noise into false failures.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Check d(f)/d(inputs) for a scalar-valued forward closure.
///
/// `f` must be deterministic and must rebuild its graph from the leaves
/// it is given on every call.
pub fn check(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], h: f64) -> GradReport {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::leaf(t.dims(), t.to_vec()))
        .collect();
    let out = f(&leaves);
    assert!(out.len() == 1, "gradcheck needs a scalar output");
    out.backward();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for (ti, input) in inputs.iter().enumerate() {
        let base = input.to_vec();
        for ei in 0..base.len() {
            let eval = |delta: f64| {
                let probe: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(tj, t)| {
                        let mut v = t.to_vec();
                        if tj == ti {
                            v[ei] += delta;
                        }
                        Tensor::new(t.dims(), v)
                    })
                    .collect();
                f(&probe).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = rel_err(analytic[ti][ei], numeric);
            if err > report.max_rel_err {
                report = GradReport {
                    max_rel_err: err,
                    worst_input: ti,
                    worst_entry: ei,
                    analytic: analytic[ti][ei],
                    numeric,
                };
            }
        }
    }
    report
}

/// Assert-forms used across the test suites.
pub fn assert_grads_match(f: impl Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], tol: f64) {
    let r = check(f, inputs, 1e-5);
    assert!(
        r.max_rel_err < tol,
        "gradient mismatch: rel err {:.3e} at input {} entry {} (analytic {:.6e}, numeric {:.6e})",
        r.max_rel_err,
        r.worst_input,
        r.worst_entry,
        r.analytic,
        r.numeric
    );
}

/// FD check against a model's own parameters, perturbing them in place.
///
/// `f` rebuilds the loss from the live parameter tensors on every call;
/// the sweep restores each entry after probing it.
pub fn check_params(f: impl Fn() -> Tensor, params: &[Parameter], h: f64) -> GradReport {
    for p in params {
        p.tensor.zero_grad();
    }
    f().backward();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.tensor.len() {
            let nudge = |delta: f64| p.tensor.update_data(|d| d[ei] += delta);
            nudge(h);
            let fp = f().item();
            nudge(-2.0 * h);
            let fm = f().item();
            nudge(h);
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[pi][ei], numeric);
            if err > report.max_rel_err {
                report = GradReport {
                    max_rel_err: err,
                    worst_input: pi,
                    worst_entry: ei,
                    analytic: analytic[pi][ei],
                    numeric,
                };
            }
        }
    }
    report
}

pub fn assert_param_grads_match(f: impl Fn() -> Tensor, params: &[Parameter], tol: f64) {
    let r = check_params(f, params, 1e-5);
    assert!(
        r.max_rel_err < tol,
        "gradient mismatch: rel err {:.3e} at parameter '{}' entry {} (analytic {:.6e}, numeric {:.6e})",
        r.max_rel_err,
        params[r.worst_input].name,
        r.worst_entry,
        r.analytic,
        r.numeric
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    pub fn random_tensor(rng: &mut Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // forward computes x^2 but we route backward through a plain sum;
        // the checker must flag it.
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]);
        let r = check(|ins| ins[0].sum(), &[x.clone()], 1e-5);
        assert!(r.max_rel_err < 1e-9);
        let r2 = check(
            |ins| ins[0].mul(&ins[0]).sum(),
            std::slice::from_ref(&x),
            1e-5,
        );
        assert!(r2.max_rel_err < 1e-9);
    }

    #[test]
    fn elementwise_ops_pass() {
        let mut rng = Rng::new(42);
        for seed in 0..3 {
            let mut r = Rng::new(seed);
            let a = random_tensor(&mut r, &[6]);
            let b = random_tensor(&mut r, &[6]);
            assert_grads_match(|ins| ins[0].mul(&ins[1]).sum(), &[a.clone(), b.clone()], 1e-6);
            assert_grads_match(|ins| ins[0].sub(&ins[1]).mul(&ins[0]).sum(), &[a, b], 1e-6);
        }
        let pos = Tensor::new(&[4], (0..4).map(|_| rng.uniform(0.2, 2.0)).collect());
        assert_grads_match(|ins| ins[0].ln().sum(), &[pos], 1e-6);
        let x = random_tensor(&mut rng, &[5]);
        assert_grads_match(|ins| ins[0].silu().sum(), &[x.clone()], 1e-6);
        assert_grads_match(|ins| ins[0].sigmoid().mul(&ins[0]).sum(), &[x], 1e-6);
    }

    #[test]
    fn matmul_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(100 + seed);
            let a = random_tensor(&mut rng, &[3, 4]);
            let b = random_tensor(&mut rng, &[4, 2]);
            let w = random_tensor(&mut rng, &[3, 2]);
            assert_grads_match(
                |ins| ins[0].matmul(&ins[1]).mul(&ins[2]).sum(),
                &[a, b, w],
                1e-4,
            );
        }
    }

    #[test]
    fn softmax_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(7 + seed);
            let x = random_tensor(&mut rng, &[5]);
            let w = random_tensor(&mut rng, &[5]);
            assert_grads_match(
                |ins| ins[0].softmax(0).mul(&ins[1]).sum(),
                &[x, w],
                1e-4,
            );
        }
    }

    #[test]
    fn conv_and_pool_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(300 + seed);
            let x = random_tensor(&mut rng, &[2, 8, 8]);
            let k = random_tensor(&mut rng, &[4, 2, 3, 3]);
            let b = random_tensor(&mut rng, &[4]);
            let probe = random_tensor(&mut rng, &[4 * 8 * 8]);
            assert_grads_match(
                |ins| {
                    ins[0]
                        .conv2d(&ins[1], Some(&ins[2]), 1, 1)
                        .flatten()
                        .mul(&ins[3])
                        .sum()
                },
                &[x, k, b, probe],
                1e-4,
            );

            let x2 = random_tensor(&mut rng, &[1, 4, 4]);
            assert_grads_match(
                |ins| ins[0].avgpool2d(2, 2).mul(&ins[0].avgpool2d(2, 2)).sum(),
                &[x2.clone()],
                1e-4,
            );
            assert_grads_match(|ins| ins[0].global_avgpool().silu().sum(), &[x2], 1e-4);
        }
    }

    #[test]
    fn strided_conv_matches_finite_differences() {
        let mut rng = Rng::new(55);
        let x = random_tensor(&mut rng, &[2, 7, 7]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let probe = random_tensor(&mut rng, &[3 * 4 * 4]);
        assert_grads_match(
            |ins| {
                ins[0]
                    .conv2d(&ins[1], None, 2, 1)
                    .flatten()
                    .mul(&ins[2])
                    .sum()
            },
            &[x, k, probe],
            1e-4,
        );
    }

    #[test]
    fn rms_norm_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(900 + seed);
            let x = random_tensor(&mut rng, &[3, 4, 4]);
            let g = random_tensor(&mut rng, &[3]);
            let probe = random_tensor(&mut rng, &[3 * 4 * 4]);
            assert_grads_match(
                |ins| {
                    ins[0]
                        .channel_rms_norm(&ins[1], 1e-5)
                        .flatten()
                        .mul(&ins[2])
                        .sum()
                },
                &[x, g, probe],
                1e-4,
            );
        }
    }

    #[test]
    fn shared_subexpression_sums_paths() {
        // y = sum(x*x) + sum(x): FD must equal 2x+1 through the double use
        let mut rng = Rng::new(33);
        let x = random_tensor(&mut rng, &[7]);
        assert_grads_match(
            |ins| ins[0].mul(&ins[0]).sum().add(&ins[0].sum()),
            &[x],
            1e-6,
        );
    }
}
