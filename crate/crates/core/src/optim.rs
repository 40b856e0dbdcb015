//! SGD with momentum and weight decay.

use crate::tensor::Parameter;

/// Velocity update: `v <- momentum*v + grad + wd*param`, then
/// `param <- param - lr*v`.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Parameter], lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// Apply one update. Panics if any parameter is missing its gradient;
    /// a step without a backward pass is a sequencing bug.
    pub fn step(&mut self, params: &[Parameter]) {
        assert_eq!(params.len(), self.velocity.len(), "optimizer/parameter list mismatch");
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p
                .tensor
                .grad()
                .unwrap_or_else(|| panic!("missing grad for parameter '{}'", p.name));
            p.tensor.update_data(|data| {
                for i in 0..data.len() {
                    v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * data[i];
                    data[i] -= self.lr * v[i];
                }
            });
        }
    }

    pub fn zero_grad(&self, params: &[Parameter]) {
        for p in params {
            p.tensor.zero_grad();
        }
    }

    /// Velocity buffers, ordered like the parameter list (checkpointed so
    /// a resumed run continues bit-identically).
    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Vec<f64>>) {
        assert_eq!(v.len(), self.velocity.len(), "velocity list length mismatch");
        for (a, b) in v.iter().zip(&self.velocity) {
            assert_eq!(a.len(), b.len(), "velocity buffer length mismatch");
        }
        self.velocity = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    fn param(data: Vec<f64>) -> Parameter {
        let n = data.len();
        Parameter::new("p", &[n], data)
    }

    fn set_grad(p: &Parameter, g: Vec<f64>) {
        p.tensor.zero_grad();
        p.tensor.accumulate_grad(|buf| buf.copy_from_slice(&g));
    }

    #[test]
    fn vanilla_step_subtracts_gradient() {
        let p = param(vec![1.0, 2.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 1.0, 0.0, 0.0);
        set_grad(&p, vec![0.5, -0.5]);
        opt.step(std::slice::from_ref(&p));
        assert_eq!(p.tensor.to_vec(), vec![0.5, 2.5]);
    }

    #[test]
    fn momentum_second_step_scales_by_1_9() {
        // constant grad g: v1 = g, v2 = 0.9g + g = 1.9g
        let p = param(vec![0.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.1, 0.9, 0.0);
        set_grad(&p, vec![1.0]);
        opt.step(std::slice::from_ref(&p));
        let after_first = p.tensor.to_vec()[0];
        assert!((after_first - (-0.1)).abs() < 1e-15);
        set_grad(&p, vec![1.0]);
        opt.step(std::slice::from_ref(&p));
        let delta2 = after_first - p.tensor.to_vec()[0];
        assert!((delta2 - 0.1 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let p = param(vec![10.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.1, 0.0, 0.5);
        set_grad(&p, vec![0.0]);
        opt.step(std::slice::from_ref(&p));
        assert!((p.tensor.to_vec()[0] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // loss = sum(x^2), optimum at 0
        let p = param(vec![3.0, -2.0, 1.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.1, 0.9, 0.0);
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            opt.zero_grad(std::slice::from_ref(&p));
            let l: Tensor = p.tensor.mul(&p.tensor).sum();
            loss = l.item();
            if loss < 1e-6 {
                break;
            }
            l.backward();
            opt.step(std::slice::from_ref(&p));
        }
        assert!(loss < 1e-6, "bowl did not converge: {loss}");
    }

    #[test]
    #[should_panic(expected = "missing grad")]
    fn step_without_grad_panics() {
        let p = param(vec![1.0]);
        let mut opt = Sgd::new(std::slice::from_ref(&p), 0.1, 0.0, 0.0);
        opt.step(std::slice::from_ref(&p));
    }
}
