//! Shared/specific feature extraction from the cleaned image pair.
//!
//! Each modality gets its own multi-scale extractor (separate weights);
//! a weight-tied residual encoder consumes both images and averages the
//! two encodings into the shared representation. The IR image is
//! replicated to three channels at the shared stem so the tied weights
//! see a uniform input layout.

use crate::nn::{Conv2d, ConvNormAct, DownBlock};
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

/// Multi-scale features for one modality; spatial extent halves per scale.
pub struct ScaleFeatureSet {
    pub scales: Vec<Tensor>,
}

impl ScaleFeatureSet {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }
}

/// Widths of the modality-specific extractor.
#[derive(Clone, Debug)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    /// Output channels per scale; the length fixes the scale count N.
    pub scale_channels: Vec<usize>,
    /// Widths of the weight-tied shared encoder (stem + one per block).
    pub shared_channels: Vec<usize>,
    /// Channel count of the shared feature after projection.
    pub shared_out: usize,
}

impl Default for BackboneConfig {
    fn default() -> BackboneConfig {
        BackboneConfig {
            stem_channels: 16,
            scale_channels: vec![16, 32, 64, 128],
            shared_channels: vec![12, 16, 24],
            shared_out: 32,
        }
    }
}

/// Stem conv plus one halving residual block per scale; the feature map
/// after block i is scale i.
pub struct SpecificExtractor {
    pub stem: ConvNormAct,
    pub blocks: Vec<DownBlock>,
}

impl SpecificExtractor {
    pub fn new(prefix: &str, in_channels: usize, cfg: &BackboneConfig, rng: &mut Rng) -> SpecificExtractor {
        let stem = ConvNormAct::new(&format!("{prefix}.stem"), in_channels, cfg.stem_channels, 3, rng);
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (i, &c_out) in cfg.scale_channels.iter().enumerate() {
            blocks.push(DownBlock::new(&format!("{prefix}.block{i}"), c_in, c_out, rng));
            c_in = c_out;
        }
        SpecificExtractor { stem, blocks }
    }

    pub fn forward(&self, image: &Tensor) -> ScaleFeatureSet {
        let d = image.dims();
        let n = self.blocks.len();
        assert!(
            d[1] % (1 << n) == 0 && d[2] % (1 << n) == 0,
            "image {}x{} not divisible by 2^{n}",
            d[1],
            d[2]
        );
        let mut x = self.stem.forward(image);
        let mut scales = Vec::with_capacity(n);
        for blk in &self.blocks {
            x = blk.forward(&x);
            scales.push(x.clone());
        }
        ScaleFeatureSet { scales }
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }
}

/// Weight-tied encoder applied to both modalities, outputs averaged and
/// projected to the fusion width.
pub struct SharedExtractor {
    pub stem: ConvNormAct,
    pub blocks: Vec<DownBlock>,
    pub proj: Conv2d,
}

impl SharedExtractor {
    pub fn new(prefix: &str, cfg: &BackboneConfig, rng: &mut Rng) -> SharedExtractor {
        assert!(cfg.shared_channels.len() >= 2, "shared encoder needs stem + blocks");
        let stem = ConvNormAct::new(&format!("{prefix}.stem"), 3, cfg.shared_channels[0], 3, rng);
        let mut blocks = Vec::new();
        let mut c_in = cfg.shared_channels[0];
        for (i, &c_out) in cfg.shared_channels[1..].iter().enumerate() {
            blocks.push(DownBlock::new(&format!("{prefix}.block{i}"), c_in, c_out, rng));
            c_in = c_out;
        }
        let proj = Conv2d::new(&format!("{prefix}.proj"), c_in, cfg.shared_out, 1, 1, 0, rng);
        SharedExtractor { stem, blocks, proj }
    }

    fn to_three_channels(image: &Tensor) -> Tensor {
        match image.dims()[0] {
            3 => image.clone(),
            1 => Tensor::concat_channels(&[image.clone(), image.clone(), image.clone()]),
            c => panic!("shared encoder expects 1 or 3 channels, got {c}"),
        }
    }

    fn encode(&self, image: &Tensor) -> Tensor {
        let mut x = self.stem.forward(&Self::to_three_channels(image));
        for blk in &self.blocks {
            x = blk.forward(&x);
        }
        x
    }

    /// `C_sha`: mean of the two tied encodings, projected.
    pub fn forward(&self, image_a: &Tensor, image_b: &Tensor) -> Tensor {
        assert!(
            image_a.dims()[1..] == image_b.dims()[1..],
            "shared extractor: spatial dims differ, {:?} vs {:?}",
            image_a.dims(),
            image_b.dims()
        );
        let mean = self.encode(image_a).add(&self.encode(image_b)).scale(0.5);
        self.proj.forward(&mean)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.proj.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::zero_params;

    fn rng() -> Rng {
        Rng::new(71)
    }

    #[test]
    fn scale_shapes_halve() {
        let cfg = BackboneConfig::default();
        let ex = SpecificExtractor::new("v", 3, &cfg, &mut rng());
        let img = Tensor::new(&[3, 64, 64], vec![0.1; 3 * 64 * 64]);
        let feats = ex.forward(&img);
        assert_eq!(feats.num_scales(), 4);
        let dims: Vec<Vec<usize>> = feats.scales.iter().map(|s| s.dims().to_vec()).collect();
        assert_eq!(dims[0], vec![16, 32, 32]);
        assert_eq!(dims[1], vec![32, 16, 16]);
        assert_eq!(dims[2], vec![64, 8, 8]);
        assert_eq!(dims[3], vec![128, 4, 4]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn rejects_indivisible_extent() {
        let cfg = BackboneConfig::default();
        let ex = SpecificExtractor::new("v", 1, &cfg, &mut rng());
        let img = Tensor::new(&[1, 24, 24], vec![0.0; 576]);
        let _ = ex.forward(&img);
    }

    #[test]
    fn zero_input_zero_params_gives_zero_features() {
        let cfg = BackboneConfig::default();
        let ex = SpecificExtractor::new("i", 1, &cfg, &mut rng());
        zero_params(&ex.params());
        let img = Tensor::new(&[1, 32, 32], vec![0.0; 1024]);
        for s in ex.forward(&img).scales {
            assert!(s.to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_is_exactly_symmetric() {
        let cfg = BackboneConfig::default();
        let sh = SharedExtractor::new("sha", &cfg, &mut rng());
        let mut r = Rng::new(5);
        let v = Tensor::new(&[3, 32, 32], (0..3 * 1024).map(|_| r.next_f64()).collect());
        let i = Tensor::new(&[1, 32, 32], (0..1024).map(|_| r.next_f64()).collect());
        let ab = sh.forward(&v, &i).to_vec();
        let ba = sh.forward(&i, &v).to_vec();
        assert_eq!(ab, ba);
    }

    #[test]
    fn shared_of_identical_inputs_is_single_encoding() {
        let cfg = BackboneConfig::default();
        let sh = SharedExtractor::new("sha", &cfg, &mut rng());
        let mut r = Rng::new(6);
        let v = Tensor::new(&[3, 32, 32], (0..3 * 1024).map(|_| r.next_f64()).collect());
        let pair = sh.forward(&v, &v).to_vec();
        let single = sh.proj.forward(&sh.encode(&v)).to_vec();
        assert_eq!(pair, single);
    }

    #[test]
    fn shared_zero_inputs_zero_params_gives_zero() {
        let cfg = BackboneConfig::default();
        let sh = SharedExtractor::new("sha", &cfg, &mut rng());
        zero_params(&sh.params());
        let v = Tensor::new(&[3, 32, 32], vec![0.0; 3 * 1024]);
        let i = Tensor::new(&[1, 32, 32], vec![0.0; 1024]);
        assert!(sh.forward(&v, &i).to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_output_dims_match_fusion_contract() {
        let cfg = BackboneConfig::default();
        let sh = SharedExtractor::new("sha", &cfg, &mut rng());
        let v = Tensor::new(&[3, 64, 64], vec![0.2; 3 * 4096]);
        let i = Tensor::new(&[1, 64, 64], vec![0.8; 4096]);
        assert_eq!(sh.forward(&v, &i).dims(), &[32, 16, 16]);
    }

    #[test]
    fn two_scale_gradcheck_on_16x16() {
        // compact widths keep the FD sweep fast
        let cfg = BackboneConfig {
            stem_channels: 2,
            scale_channels: vec![2, 3],
            shared_channels: vec![2, 2],
            shared_out: 4,
        };
        for seed in 0..3 {
            let ex = SpecificExtractor::new("v", 1, &cfg, &mut Rng::new(100 + seed));
            let mut r = Rng::new(seed);
            let img = Tensor::new(&[1, 16, 16], (0..256).map(|_| r.uniform(-1.0, 1.0)).collect());
            let probe = Tensor::new(&[3 * 4 * 4], (0..48).map(|_| r.uniform(-1.0, 1.0)).collect());
            let params = ex.params();
            gradcheck::assert_param_grads_match(
                || ex.forward(&img).scales[1].flatten().mul(&probe).sum(),
                &params,
                1e-3,
            );
        }
    }
}
