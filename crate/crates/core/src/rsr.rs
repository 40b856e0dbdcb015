//! Redundant spectrum removal: predict a per-modality patch filter from
//! the amplitude image, apply it to the spectrum, and synthesize the
//! cleaned spatial image.
//!
//! The filter is recomputed for every image — nothing is cached across
//! inputs. Retained (top-K) patches always pass at exactly 1.0; the
//! remaining patches are sigmoid-attenuated (soft mode) or zeroed (hard
//! mode). Hard mode trains with a straight-through rule: the forward
//! value is binary, the backward rule is the soft filter's.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::spectral::{self, ComplexSpectrum};
use crate::tensor::{sigmoid, Parameter, Tensor};

/// Partition of an H×W spectrum into P×Q equal patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    /// Panics unless the grid divides the extents evenly.
    pub fn new(rows: usize, cols: usize, height: usize, width: usize) -> PatchGrid {
        assert!(
            rows >= 1 && cols >= 1 && height % rows == 0 && width % cols == 0,
            "indivisible grid: {rows}x{cols} over {height}x{width}"
        );
        PatchGrid {
            rows,
            cols,
            patch_h: height / rows,
            patch_w: width / cols,
        }
    }

    /// Total patch count m = P·Q.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_h
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    Soft,
    Hard,
}

impl FilterMode {
    pub fn parse(s: &str) -> Option<FilterMode> {
        match s {
            "soft" => Some(FilterMode::Soft),
            "hard" => Some(FilterMode::Hard),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterMode::Soft => "soft",
            FilterMode::Hard => "hard",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RsrConfig {
    pub k: usize,
    pub mode: FilterMode,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Hidden units of the shared per-patch scorer (widths m -> h·m -> m).
    pub encoder_hidden: usize,
}

impl Default for RsrConfig {
    fn default() -> RsrConfig {
        // 8x8 grid on 64x64 images: m=64, keep ratio 0.8 => K=51, soft.
        RsrConfig {
            k: 51,
            mode: FilterMode::Soft,
            grid_rows: 8,
            grid_cols: 8,
            encoder_hidden: 2,
        }
    }
}

impl RsrConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.grid_rows * self.grid_cols;
        if self.k < 1 || self.k > m {
            return Err(Error::data(format!(
                "rsr.k must satisfy 1 <= k <= {m}, got {}",
                self.k
            )));
        }
        if self.encoder_hidden < 1 {
            return Err(Error::data("rsr.encoder_hidden must be >= 1"));
        }
        Ok(())
    }
}

/// Piecewise-constant spectral mask produced for one modality.
#[derive(Clone)]
pub struct SpectralFilter {
    pub grid: PatchGrid,
    /// `[H, W]` mask values in [0,1], on the tape.
    pub values: Tensor,
    pub mode: FilterMode,
    pub k: usize,
}

/// Everything the coarse stage produces for one image.
pub struct RsrOutput {
    pub cleaned: Tensor,
    pub filter: SpectralFilter,
    pub spectrum: ComplexSpectrum,
    pub filtered: ComplexSpectrum,
}

/// Per-patch mean of log(1+amplitude), row-major over patches, `[m, 1]`.
pub fn patch_stats(amp: &Tensor, grid: &PatchGrid) -> Tensor {
    let d = amp.dims();
    assert!(
        d.len() == 3 && d[0] == 1 && d[1] == grid.height() && d[2] == grid.width(),
        "patch_stats expects [1,{},{}], got {:?}",
        grid.height(),
        grid.width(),
        d
    );
    let (h, w) = (d[1], d[2]);
    let inv = 1.0 / (grid.patch_h * grid.patch_w) as f64;
    let stats = amp.with_data(|a| {
        let mut out = vec![0.0; grid.len()];
        for pr in 0..grid.rows {
            for pc in 0..grid.cols {
                let mut s = 0.0;
                for i in 0..grid.patch_h {
                    for j in 0..grid.patch_w {
                        s += a[(pr * grid.patch_h + i) * w + pc * grid.patch_w + j].ln_1p();
                    }
                }
                out[pr * grid.cols + pc] = s * inv;
            }
        }
        debug_assert_eq!(h, grid.height());
        out
    });
    Tensor::new(&[grid.len(), 1], stats)
}

/// Importance scorer: one logit per patch via a weight-shared per-patch
/// MLP, so permuting two input patches permutes exactly the two logits.
pub struct ImportanceEncoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl ImportanceEncoder {
    pub fn new(prefix: &str, hidden: usize, rng: &mut Rng) -> ImportanceEncoder {
        let l1 = Linear::new(&format!("{prefix}.l1"), 1, hidden, rng);
        let l2 = Linear::new(&format!("{prefix}.l2"), hidden, 1, rng);
        // Positive logit bias so an untrained soft filter starts close
        // to the identity; training then pulls noise patches down.
        l2.b.tensor.update_data(|d| d.fill(2.0));
        ImportanceEncoder { l1, l2 }
    }

    /// `[m,1] stats -> [m] logits`
    pub fn forward(&self, stats: &Tensor) -> Tensor {
        let m = stats.dims()[0];
        self.l2
            .forward(&self.l1.forward(stats).silu())
            .reshape(&[m])
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p
    }
}

/// Indices of the K largest logits, ties broken toward lower index.
pub fn topk_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("non-finite logit")
            .then(a.cmp(&b))
    });
    let mut sel = idx[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Patch mask from logits: top-K positions pass at exactly 1.0, the
/// rest sigmoid-attenuate (soft) or zero out (hard). The backward rule
/// is the soft filter's in both modes.
pub fn topk_filter(logits: &Tensor, k: usize, mode: FilterMode) -> Tensor {
    let m = logits.len();
    assert!(logits.dims() == [m], "topk_filter expects a vector");
    assert!(k >= 1 && k <= m, "K out of range: {k} not in 1..={m}");
    let values = logits.to_vec();
    let selected = topk_indices(&values, k);
    let mut is_top = vec![false; m];
    for &i in &selected {
        is_top[i] = true;
    }
    let data: Vec<f64> = (0..m)
        .map(|i| {
            if is_top[i] {
                1.0
            } else {
                match mode {
                    FilterMode::Soft => sigmoid(values[i]),
                    FilterMode::Hard => 0.0,
                }
            }
        })
        .collect();
    Tensor::from_op(vec![m], data, vec![logits.clone()], move |ctx| {
        let l = ctx.parents[0].data_ref();
        ctx.parents[0].accumulate_grad(|g| {
            for i in 0..m {
                if !is_top[i] {
                    let s = sigmoid(l[i]);
                    g[i] += ctx.grad[i] * s * (1.0 - s);
                }
            }
        });
    })
}

/// Replicate each patch value over its block, nearest-neighbor style.
pub fn expand_filter(mask: &Tensor, grid: &PatchGrid, mode: FilterMode, k: usize) -> SpectralFilter {
    let m = grid.len();
    assert!(mask.dims() == [m], "expand_filter: mask {:?} vs m={}", mask.dims(), m);
    let (h, w) = (grid.height(), grid.width());
    let g = *grid;
    let data = mask.with_data(|mv| {
        let mut out = vec![0.0; h * w];
        for pr in 0..g.rows {
            for pc in 0..g.cols {
                let v = mv[pr * g.cols + pc];
                for i in 0..g.patch_h {
                    for j in 0..g.patch_w {
                        out[(pr * g.patch_h + i) * w + pc * g.patch_w + j] = v;
                    }
                }
            }
        }
        out
    });
    let values = Tensor::from_op(vec![h, w], data, vec![mask.clone()], move |ctx| {
        ctx.parents[0].accumulate_grad(|gm| {
            for pr in 0..g.rows {
                for pc in 0..g.cols {
                    let mut s = 0.0;
                    for i in 0..g.patch_h {
                        for j in 0..g.patch_w {
                            s += ctx.grad[(pr * g.patch_h + i) * w + pc * g.patch_w + j];
                        }
                    }
                    gm[pr * g.cols + pc] += s;
                }
            }
        });
    });
    SpectralFilter {
        grid: g,
        values,
        mode,
        k,
    }
}

/// Multiply a spectrum by a real `[H,W]` mask (shared across channels)
/// and synthesize the real spatial image. Returns the filtered spectrum
/// alongside for inspection.
///
/// A patchwise mask is generally not conjugate-symmetric, so the
/// synthesized image keeps only the real part; gradients flow to the
/// mask through that projection.
pub fn spectral_apply(filter_values: &Tensor, spec: &ComplexSpectrum) -> (Tensor, ComplexSpectrum) {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    assert!(
        filter_values.dims() == [h, w],
        "spectral_apply: filter {:?} vs spectrum {}x{}",
        filter_values.dims(),
        h,
        w
    );
    let mut filtered = spec.clone();
    filter_values.with_data(|f| {
        for ch in 0..c {
            for i in 0..h * w {
                filtered.re[ch * h * w + i] *= f[i];
                filtered.im[ch * h * w + i] *= f[i];
            }
        }
    });
    let cleaned_plain = spectral::idft2_real(&filtered);
    let parent_spec = spec.clone();
    let cleaned = Tensor::from_op(
        vec![c, h, w],
        cleaned_plain.to_vec(),
        vec![filter_values.clone()],
        move |ctx| {
            // dL/dH(u,v) = (1/HW) Σ_c Re(F_c(u,v) · conj(DFT(G_c)(u,v)))
            let grad_img = Tensor::new(&[c, h, w], ctx.grad.to_vec());
            let grad_spec = spectral::dft2(&grad_img);
            let norm = 1.0 / (h * w) as f64;
            ctx.parents[0].accumulate_grad(|gf| {
                for ch in 0..c {
                    for i in 0..h * w {
                        let fr = parent_spec.re[ch * h * w + i];
                        let fi = parent_spec.im[ch * h * w + i];
                        let gr = grad_spec.re[ch * h * w + i];
                        let gi = grad_spec.im[ch * h * w + i];
                        gf[i] += norm * (fr * gr + fi * gi);
                    }
                }
            });
        },
    );
    (cleaned, filtered)
}

/// The coarse stage for one modality.
pub struct RsrModule {
    pub cfg: RsrConfig,
    pub encoder: ImportanceEncoder,
}

impl RsrModule {
    pub fn new(prefix: &str, cfg: RsrConfig, rng: &mut Rng) -> RsrModule {
        let encoder = ImportanceEncoder::new(&format!("{prefix}.encoder"), cfg.encoder_hidden, rng);
        RsrModule { cfg, encoder }
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.encoder.params()
    }

    pub fn grid_for(&self, height: usize, width: usize) -> PatchGrid {
        PatchGrid::new(self.cfg.grid_rows, self.cfg.grid_cols, height, width)
    }

    /// Patch importance logits for an amplitude image, row-major order.
    pub fn encode_importance(&self, amp: &Tensor, grid: &PatchGrid) -> Tensor {
        self.encoder.forward(&patch_stats(amp, grid))
    }

    /// Full coarse pass: spectrum, dynamic filter, cleaned image.
    pub fn apply(&self, image: &Tensor) -> RsrOutput {
        let d = image.dims();
        let grid = self.grid_for(d[1], d[2]);
        let spec = spectral::dft2(image);
        let amp = spectral::amplitude_mean(&spec);
        let logits = self.encode_importance(&amp, &grid);
        let mask = topk_filter(&logits, self.cfg.k, self.cfg.mode);
        let filter = expand_filter(&mask, &grid, self.cfg.mode, self.cfg.k);
        let (cleaned, filtered) = spectral_apply(&filter.values, &spec);
        RsrOutput {
            cleaned,
            filter,
            spectrum: spec,
            filtered,
        }
    }
}
