//! The full detector: per-modality spectrum removal, shared/specific
//! extraction, gated expert fusion, and the detection head, with
//! switches that degrade either fusion stage to its ablation baseline.

use crate::backbone::{BackboneConfig, SharedExtractor, SpecificExtractor};
use crate::detect::DetectHead;
use crate::dfs::{DfsConfig, DfsModule, DfsOutput};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::rsr::{RsrConfig, RsrModule, RsrOutput};
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Coarse stage on/off; off feeds raw images to the extractors.
    pub use_rsr: bool,
    /// Fine stage dynamic gating on/off; off fuses with fixed 0.5 weights.
    pub use_dfs: bool,
    pub classes: usize,
    pub rsr: RsrConfig,
    pub dfs: DfsConfig,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            use_rsr: true,
            use_dfs: true,
            classes: 2,
            rsr: RsrConfig::default(),
            dfs: DfsConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Compact widths for finite-difference sweeps on 16x16 inputs.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            use_rsr: true,
            use_dfs: true,
            classes: 2,
            rsr: RsrConfig {
                k: 12,
                mode: crate::rsr::FilterMode::Soft,
                grid_rows: 4,
                grid_cols: 4,
                encoder_hidden: 2,
            },
            dfs: DfsConfig {
                threshold: 0.3,
                expert_channels: 2,
            },
            backbone: BackboneConfig {
                stem_channels: 2,
                scale_channels: vec![2, 2, 3, 3],
                shared_channels: vec![2, 2, 2],
                shared_out: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rsr.validate()?;
        self.dfs.validate()?;
        if self.classes < 1 {
            return Err(Error::data("model.classes must be >= 1"));
        }
        if self.backbone.scale_channels.len() != 4 {
            return Err(Error::data(format!(
                "backbone must produce 4 scales, got {}",
                self.backbone.scale_channels.len()
            )));
        }
        Ok(())
    }

    /// Channels of the fused feature C (and of the shared projection).
    pub fn fused_channels(&self) -> usize {
        self.backbone.scale_channels.len() * self.dfs.expert_channels
    }
}

/// Everything one coarse-to-fine pass produces.
pub struct ForwardTrace {
    pub cleaned_i: Tensor,
    pub cleaned_v: Tensor,
    pub rsr_i: Option<RsrOutput>,
    pub rsr_v: Option<RsrOutput>,
    pub c_sha: Tensor,
    pub dfs: DfsOutput,
    /// C = C_sha + C_spe.
    pub fused: Tensor,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub rsr_i: Option<RsrModule>,
    pub rsr_v: Option<RsrModule>,
    pub spec_i: SpecificExtractor,
    pub spec_v: SpecificExtractor,
    pub shared: SharedExtractor,
    pub dfs: DfsModule,
    pub head: DetectHead,
}

impl Model {
    pub fn new(mut cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.backbone.shared_out = cfg.fused_channels();
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let rsr_i = cfg
            .use_rsr
            .then(|| RsrModule::new("rsr_i", cfg.rsr.clone(), &mut rng));
        let rsr_v = cfg
            .use_rsr
            .then(|| RsrModule::new("rsr_v", cfg.rsr.clone(), &mut rng));
        let spec_i = SpecificExtractor::new("backbone_i", 1, &cfg.backbone, &mut rng);
        let spec_v = SpecificExtractor::new("backbone_v", 3, &cfg.backbone, &mut rng);
        let shared = SharedExtractor::new("shared", &cfg.backbone, &mut rng);
        let dfs = DfsModule::new(
            "dfs",
            cfg.dfs.clone(),
            &cfg.backbone.scale_channels,
            cfg.use_dfs,
            &mut rng,
        );
        let head = DetectHead::new("head", cfg.fused_channels(), cfg.classes, &mut rng);
        let model = Model {
            cfg,
            rsr_i,
            rsr_v,
            spec_i,
            spec_v,
            shared,
            dfs,
            head,
        };
        model.assert_unique_names();
        Ok(model)
    }

    /// Parameters in a fixed registration order; names are unique.
    pub fn params(&self) -> Vec<Parameter> {
        let mut p = Vec::new();
        if let Some(r) = &self.rsr_i {
            p.extend(r.params());
        }
        if let Some(r) = &self.rsr_v {
            p.extend(r.params());
        }
        p.extend(self.spec_i.params());
        p.extend(self.spec_v.params());
        p.extend(self.shared.params());
        p.extend(self.dfs.params());
        p.extend(self.head.params());
        p
    }

    fn assert_unique_names(&self) {
        let mut names: Vec<String> = self.params().iter().map(|p| p.name.clone()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(total, names.len(), "duplicate parameter names in model");
    }

    /// Full coarse-to-fine pass on one image pair.
    ///
    /// `straight_through` enables the training-time gradient rule for
    /// the discrete routing gates; checks that compare against finite
    /// differences must turn it off.
    pub fn forward(&self, image_v: &Tensor, image_i: &Tensor, straight_through: bool) -> ForwardTrace {
        assert!(
            image_v.dims()[1..] == image_i.dims()[1..],
            "paired images must share extent: {:?} vs {:?}",
            image_v.dims(),
            image_i.dims()
        );
        let (rsr_i_out, cleaned_i) = match &self.rsr_i {
            Some(r) => {
                let out = r.apply(image_i);
                let cleaned = out.cleaned.clone();
                (Some(out), cleaned)
            }
            None => (None, image_i.clone()),
        };
        let (rsr_v_out, cleaned_v) = match &self.rsr_v {
            Some(r) => {
                let out = r.apply(image_v);
                let cleaned = out.cleaned.clone();
                (Some(out), cleaned)
            }
            None => (None, image_v.clone()),
        };

        let feats_i = self.spec_i.forward(&cleaned_i);
        let feats_v = self.spec_v.forward(&cleaned_v);
        let c_sha = self.shared.forward(&cleaned_v, &cleaned_i);
        let dfs = self.dfs.forward(&feats_i, &feats_v, straight_through);
        let fused = c_sha.add(&dfs.c_spe);

        ForwardTrace {
            cleaned_i,
            cleaned_v,
            rsr_i: rsr_i_out,
            rsr_v: rsr_v_out,
            c_sha,
            dfs,
            fused,
        }
    }
}
