//! Small building blocks shared by the feature extractors, experts,
//! and heads: linear layers, conv blocks, and a halving residual block.
//!
//! Spatial halving uses a 2x2 average pool followed by stride-1 convs;
//! the conv contract rejects stride-2 odd kernels on even maps (the
//! output extent would not be integral), so pooling is how every block
//! steps down a scale.

use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

// Large enough that the norm stays well-conditioned (and finite-
// difference checkable) around zero activations.
const RMS_EPS: f64 = 1e-3;

/// Kaiming-style fan-in uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn kaiming_uniform(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform(-bound, bound)).collect()
}

pub struct Linear {
    pub w: Parameter,
    pub b: Parameter,
}

impl Linear {
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Linear {
        Linear {
            w: Parameter::new(
                format!("{prefix}.w"),
                &[fan_in, fan_out],
                kaiming_uniform(rng, fan_in, fan_in * fan_out),
            ),
            b: Parameter::new(format!("{prefix}.b"), &[fan_out], vec![0.0; fan_out]),
        }
    }

    /// `[m, fan_in] -> [m, fan_out]`
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w.tensor).add_row_bias(&self.b.tensor)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }
}

pub struct Conv2d {
    pub w: Parameter,
    pub b: Parameter,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Conv2d {
        let fan_in = c_in * k * k;
        Conv2d {
            w: Parameter::new(
                format!("{prefix}.w"),
                &[c_out, c_in, k, k],
                kaiming_uniform(rng, fan_in, c_out * fan_in),
            ),
            b: Parameter::new(format!("{prefix}.b"), &[c_out], vec![0.0; c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w.tensor, Some(&self.b.tensor), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// conv -> channel RMS norm -> SiLU
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub gain: Parameter,
}

impl ConvNormAct {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> ConvNormAct {
        ConvNormAct {
            conv: Conv2d::new(&format!("{prefix}.conv"), c_in, c_out, k, 1, k / 2, rng),
            gain: Parameter::new(format!("{prefix}.gain"), &[c_out], vec![1.0; c_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.conv
            .forward(x)
            .channel_rms_norm(&self.gain.tensor, RMS_EPS)
            .silu()
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.conv.params();
        p.push(self.gain.clone());
        p
    }
}

/// Residual block that halves the spatial extent:
/// pool(2x2) -> conv/norm/act -> conv/norm, plus a pooled 1x1 shortcut.
pub struct DownBlock {
    pub body1: ConvNormAct,
    pub conv2: Conv2d,
    pub gain2: Parameter,
    pub shortcut: Conv2d,
}

impl DownBlock {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, rng: &mut Rng) -> DownBlock {
        DownBlock {
            body1: ConvNormAct::new(&format!("{prefix}.b1"), c_in, c_out, 3, rng),
            conv2: Conv2d::new(&format!("{prefix}.b2.conv"), c_out, c_out, 3, 1, 1, rng),
            gain2: Parameter::new(format!("{prefix}.b2.gain"), &[c_out], vec![1.0; c_out]),
            shortcut: Conv2d::new(&format!("{prefix}.sc"), c_in, c_out, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let pooled = x.avgpool2d(2, 2);
        let main = self
            .conv2
            .forward(&self.body1.forward(&pooled))
            .channel_rms_norm(&self.gain2.tensor, RMS_EPS);
        main.add(&self.shortcut.forward(&pooled)).silu()
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.body1.params();
        p.extend(self.conv2.params());
        p.push(self.gain2.clone());
        p.extend(self.shortcut.params());
        p
    }
}

/// Zero all parameter values (tests for the zero-propagation contracts).
pub fn zero_params(params: &[Parameter]) {
    for p in params {
        p.tensor.update_data(|d| d.fill(0.0));
    }
}
