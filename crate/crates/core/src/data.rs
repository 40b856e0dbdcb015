//! Deterministic paired RGB/IR scene synthesis.
//!
//! Scenes carry rectangles and ellipses over a smooth background. In
//! the day regime objects contrast well in RGB; at night the RGB
//! contrast collapses and broadband RGB noise rises while the IR
//! channel renders objects as bright blobs. Structured high-frequency
//! noise (checkerboard, stripes, an oblique carrier) is injected into
//! the backgrounds of both modalities so the spectrum-removal stage has
//! concentrated redundancy to take out; the noise-free renders are kept
//! as clean references for SNR audits.
//!
//! Pixels are quantized to the 8-bit file grid at generation time, so
//! an in-memory corpus and a written-then-read corpus train
//! identically.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::DataConfig;
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Day,
    Night,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Day => "day",
            Regime::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "day" => Some(Regime::Day),
            "night" => Some(Regime::Night),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseProfile {
    pub enabled: bool,
    /// Peak amplitude of the structured background noise.
    pub structured_amplitude: f64,
    /// Extra broadband RGB noise sigma in the night regime.
    pub rgb_night_sigma: f64,
}

impl NoiseProfile {
    pub fn off() -> NoiseProfile {
        NoiseProfile {
            enabled: false,
            structured_amplitude: 0.0,
            rgb_night_sigma: 0.0,
        }
    }
}

/// One paired sample, stored as plain buffers (planar `[C,H,W]`).
#[derive(Clone, Debug)]
pub struct Scene {
    pub size: usize,
    pub image_v: Vec<f64>,
    pub image_i: Vec<f64>,
    pub clean_v: Vec<f64>,
    pub clean_i: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub seed: u64,
    pub regime: Regime,
}

impl Scene {
    pub fn tensor_v(&self) -> Tensor {
        Tensor::new(&[3, self.size, self.size], self.image_v.clone())
    }

    pub fn tensor_i(&self) -> Tensor {
        Tensor::new(&[1, self.size, self.size], self.image_i.clone())
    }

    pub fn clean_tensor_v(&self) -> Tensor {
        Tensor::new(&[3, self.size, self.size], self.clean_v.clone())
    }

    pub fn clean_tensor_i(&self) -> Tensor {
        Tensor::new(&[1, self.size, self.size], self.clean_i.clone())
    }
}

struct Canvas {
    size: usize,
    /// [3,H,W]
    rgb: Vec<f64>,
    /// [1,H,W]
    ir: Vec<f64>,
    object_mask: Vec<bool>,
}

fn low_frequency_field(rng: &mut Rng, size: usize, amp: f64) -> Vec<f64> {
    let fx = 1 + rng.below(2);
    let fy = 1 + rng.below(2);
    let (px, py) = (rng.uniform(0.0, std::f64::consts::TAU), rng.uniform(0.0, std::f64::consts::TAU));
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let vx = (std::f64::consts::TAU * fx as f64 * x as f64 / size as f64 + px).sin();
            let vy = (std::f64::consts::TAU * fy as f64 * y as f64 / size as f64 + py).sin();
            out[y * size + x] = amp * vx * vy;
        }
    }
    out
}

fn draw_object(canvas: &mut Canvas, rng: &mut Rng, regime: Regime) -> BBox {
    let size = canvas.size;
    let category = rng.below(3);
    let (lo, hi) = match category {
        0 => (6.0, 10.0),
        1 => (12.0, 20.0),
        _ => (22.0, 32.0),
    };
    let bw = rng.uniform(lo, hi).min(size as f64 / 2.0);
    let bh = rng.uniform(lo, hi).min(size as f64 / 2.0);
    let x1 = rng.uniform(1.0, size as f64 - bw - 1.0);
    let y1 = rng.uniform(1.0, size as f64 - bh - 1.0);
    let class_id = rng.below(2);

    // modality appearance
    let ir_level = match regime {
        Regime::Day => rng.uniform(0.65, 0.85),
        Regime::Night => rng.uniform(0.8, 0.97),
    };
    let contrast = match regime {
        Regime::Day => rng.uniform(0.35, 0.55),
        Regime::Night => rng.uniform(0.04, 0.08),
    };
    let signs = [
        if rng.next_f64() < 0.5 { -1.0 } else { 1.0 },
        if rng.next_f64() < 0.5 { -1.0 } else { 1.0 },
        if rng.next_f64() < 0.5 { -1.0 } else { 1.0 },
    ];

    let (cx, cy) = (x1 + bw / 2.0, y1 + bh / 2.0);
    let (rx, ry) = (bw / 2.0, bh / 2.0);
    let plane = size * size;
    for y in y1.floor() as usize..(y1 + bh).ceil() as usize {
        for x in x1.floor() as usize..(x1 + bw).ceil() as usize {
            if x >= size || y >= size {
                continue;
            }
            let inside = if class_id == 0 {
                (x as f64 + 0.5) >= x1
                    && (x as f64 + 0.5) <= x1 + bw
                    && (y as f64 + 0.5) >= y1
                    && (y as f64 + 0.5) <= y1 + bh
            } else {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            };
            if !inside {
                continue;
            }
            let idx = y * size + x;
            canvas.object_mask[idx] = true;
            canvas.ir[idx] = ir_level;
            for c in 0..3 {
                let bg = canvas.rgb[c * plane + idx];
                canvas.rgb[c * plane + idx] = (bg + signs[c] * contrast).clamp(0.02, 0.98);
            }
        }
    }

    BBox {
        x1,
        y1,
        x2: x1 + bw,
        y2: y1 + bh,
        score: 1.0,
        class_id,
    }
}

/// Structured background noise: Nyquist checkerboard, axis stripes, and
/// one oblique mid-frequency carrier — a handful of concentrated
/// spectral lines, masked away from object pixels.
fn structured_noise(rng: &mut Rng, size: usize, amplitude: f64, mask: &[bool]) -> Vec<f64> {
    let a_checker = amplitude * rng.uniform(0.5, 1.0);
    let a_v = amplitude * rng.uniform(0.3, 0.7);
    let a_h = amplitude * rng.uniform(0.3, 0.7);
    let a_diag = amplitude * rng.uniform(0.4, 0.8);
    let (fu, fv) = (size / 4, size / 8 * 3);
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let idx = y * size + x;
            if mask[idx] {
                continue;
            }
            let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            let vs = if x % 2 == 0 { 1.0 } else { -1.0 };
            let hs = if y % 2 == 0 { 1.0 } else { -1.0 };
            let diag = (std::f64::consts::TAU
                * (fu as f64 * y as f64 / size as f64 + fv as f64 * x as f64 / size as f64)
                + phase)
                .cos();
            out[idx] = a_checker * checker + a_v * vs + a_h * hs + a_diag * diag;
        }
    }
    out
}

/// Render one scene. `size` must be a power of two >= 32.
pub fn generate(
    seed: u64,
    size: usize,
    regime: Regime,
    n_objects: usize,
    noise: &NoiseProfile,
) -> Result<Scene> {
    if size < 32 || !size.is_power_of_two() {
        return Err(Error::data(format!(
            "degenerate scene size {size}: need a power of two >= 32"
        )));
    }
    let mut rng = Rng::new(seed);
    let plane = size * size;

    // background
    let mut canvas = Canvas {
        size,
        rgb: vec![0.0; 3 * plane],
        ir: vec![0.0; plane],
        object_mask: vec![false; plane],
    };
    let darken = match regime {
        Regime::Day => 1.0,
        Regime::Night => 0.35,
    };
    for c in 0..3 {
        let base = rng.uniform(0.3, 0.5) * darken;
        let field = low_frequency_field(&mut rng, size, 0.08 * darken);
        for i in 0..plane {
            canvas.rgb[c * plane + i] = (base + field[i]).clamp(0.02, 0.98);
        }
    }
    {
        let base = rng.uniform(0.18, 0.3);
        let field = low_frequency_field(&mut rng, size, 0.05);
        for i in 0..plane {
            canvas.ir[i] = (base + field[i]).clamp(0.02, 0.98);
        }
    }

    let boxes: Vec<BBox> = (0..n_objects)
        .map(|_| draw_object(&mut canvas, &mut rng, regime))
        .collect();

    // noise-free references, quantized like the files
    let clean_v: Vec<f64> = canvas.rgb.iter().map(|&v| pnm::quantize_unit(v)).collect();
    let clean_i: Vec<f64> = canvas.ir.iter().map(|&v| pnm::quantize_unit(v)).collect();

    let mut image_v = canvas.rgb.clone();
    let mut image_i = canvas.ir.clone();
    if noise.enabled {
        let pattern_v = structured_noise(&mut rng, size, noise.structured_amplitude, &canvas.object_mask);
        let pattern_i = structured_noise(&mut rng, size, noise.structured_amplitude, &canvas.object_mask);
        let night_sigma = if regime == Regime::Night {
            noise.rgb_night_sigma
        } else {
            0.01
        };
        for i in 0..plane {
            for c in 0..3 {
                image_v[c * plane + i] += pattern_v[i] + night_sigma * rng.normal();
            }
            image_i[i] += pattern_i[i] + 0.01 * rng.normal();
        }
    }
    let image_v: Vec<f64> = image_v.iter().map(|&v| pnm::quantize_unit(v)).collect();
    let image_i: Vec<f64> = image_i.iter().map(|&v| pnm::quantize_unit(v)).collect();

    Ok(Scene {
        size,
        image_v,
        image_i,
        clean_v,
        clean_i,
        boxes,
        seed,
        regime,
    })
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub size: usize,
}

impl Corpus {
    /// Index split: the first `fraction` of scenes train, the rest evaluate.
    pub fn split(&self, fraction: f64) -> (&[Scene], &[Scene]) {
        let k = ((self.scenes.len() as f64) * fraction).round() as usize;
        let k = k.min(self.scenes.len());
        (&self.scenes[..k], &self.scenes[k..])
    }
}

/// Generate `cfg.count` scenes from per-index streams split off the
/// corpus seed; parallel generation is bit-identical to sequential.
pub fn generate_corpus(cfg: &DataConfig, seed: u64) -> Result<Corpus> {
    let noise = NoiseProfile {
        enabled: cfg.noise,
        structured_amplitude: cfg.noise_amplitude,
        rgb_night_sigma: cfg.rgb_night_sigma,
    };
    let scenes: Result<Vec<Scene>> = (0..cfg.count)
        .into_par_iter()
        .map(|idx| {
            let mut pick = Rng::derive(seed, idx as u64);
            let regime = if pick.next_f64() < cfg.night_fraction {
                Regime::Night
            } else {
                Regime::Day
            };
            let n_objects = 1 + pick.below(cfg.max_objects.max(1));
            generate(pick.next_u64(), cfg.size, regime, n_objects, &noise)
        })
        .collect();
    Ok(Corpus {
        scenes: scenes?,
        size: cfg.size,
    })
}

fn scene_paths(dir: &Path, idx: usize) -> [std::path::PathBuf; 4] {
    [
        dir.join(format!("scene_{idx:05}_v.ppm")),
        dir.join(format!("scene_{idx:05}_i.pgm")),
        dir.join(format!("scene_{idx:05}_clean_v.ppm")),
        dir.join(format!("scene_{idx:05}_clean_i.pgm")),
    ]
}

/// Write images, clean references, boxes.csv, scenes.csv, corpus.cfg.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut boxes_csv = String::from("image_id,class_id,x1,y1,x2,y2\n");
    let mut scenes_csv = String::from("image_id,seed,regime\n");
    for (idx, scene) in corpus.scenes.iter().enumerate() {
        let [pv, pi, pcv, pci] = scene_paths(dir, idx);
        pnm::write_ppm(&pv, &scene.tensor_v())?;
        pnm::write_pgm(&pi, &scene.tensor_i())?;
        pnm::write_ppm(&pcv, &scene.clean_tensor_v())?;
        pnm::write_pgm(&pci, &scene.clean_tensor_i())?;
        for b in &scene.boxes {
            let _ = writeln!(
                boxes_csv,
                "{idx},{},{},{},{},{}",
                b.class_id, b.x1, b.y1, b.x2, b.y2
            );
        }
        let _ = writeln!(scenes_csv, "{idx},{},{}", scene.seed, scene.regime.as_str());
    }
    std::fs::write(dir.join("boxes.csv"), boxes_csv).map_err(|e| Error::io(dir.join("boxes.csv"), e))?;
    std::fs::write(dir.join("scenes.csv"), scenes_csv)
        .map_err(|e| Error::io(dir.join("scenes.csv"), e))?;
    let meta = format!("count={}\nsize={}\n", corpus.scenes.len(), corpus.size);
    std::fs::write(dir.join("corpus.cfg"), meta).map_err(|e| Error::io(dir.join("corpus.cfg"), e))
}

fn parse_csv_line<const N: usize>(path: &Path, line_no: usize, offset: u64, line: &str) -> Result<[f64; N]> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != N {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: format!("line {line_no}: expected {N} fields, got {}", fields.len()),
        });
    }
    let mut out = [0.0; N];
    for (i, f) in fields.iter().enumerate() {
        out[i] = f.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: format!("line {line_no}: unparseable number '{f}'"),
        })?;
    }
    Ok(out)
}

/// Read a corpus written by [`write_corpus`], validating bounds.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let meta = crate::config::Config::load(&dir.join("corpus.cfg"))?;
    let count = meta.get_usize("count", 0)?;
    let size = meta.get_usize("size", 0)?;
    if count == 0 || size == 0 {
        return Err(Error::data(format!(
            "corpus.cfg in {} lacks count/size",
            dir.display()
        )));
    }

    // boxes grouped by image id
    let boxes_path = dir.join("boxes.csv");
    let text = std::fs::read_to_string(&boxes_path).map_err(|e| Error::io(&boxes_path, e))?;
    let mut boxes: Vec<Vec<BBox>> = vec![Vec::new(); count];
    let mut offset = 0u64;
    for (line_no, line) in text.lines().enumerate() {
        let this_offset = offset;
        offset += line.len() as u64 + 1;
        if line_no == 0 || line.trim().is_empty() {
            continue;
        }
        let f: [f64; 6] = parse_csv_line(&boxes_path, line_no + 1, this_offset, line)?;
        let image_id = f[0] as usize;
        if image_id >= count {
            return Err(Error::Parse {
                path: boxes_path.clone(),
                offset: this_offset,
                msg: format!("line {}: image_id {} out of range", line_no + 1, image_id),
            });
        }
        let b = BBox {
            x1: f[2],
            y1: f[3],
            x2: f[4],
            y2: f[5],
            score: 1.0,
            class_id: f[1] as usize,
        };
        if !(b.x2 > b.x1 && b.y2 > b.y1 && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= size as f64 && b.y2 <= size as f64) {
            return Err(Error::Parse {
                path: boxes_path.clone(),
                offset: this_offset,
                msg: format!("line {}: box out of bounds", line_no + 1),
            });
        }
        boxes[image_id].push(b);
    }

    // regimes and seeds
    let scenes_path = dir.join("scenes.csv");
    let text = std::fs::read_to_string(&scenes_path).map_err(|e| Error::io(&scenes_path, e))?;
    let mut meta_rows: Vec<(u64, Regime)> = vec![(0, Regime::Day); count];
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "{}: line {}: expected 3 fields",
                scenes_path.display(),
                line_no + 1
            )));
        }
        let idx: usize = fields[0].parse().map_err(|_| Error::data("bad image_id"))?;
        let seed: u64 = fields[1].parse().map_err(|_| Error::data("bad seed"))?;
        let regime = Regime::parse(fields[2])
            .ok_or_else(|| Error::data(format!("bad regime '{}'", fields[2])))?;
        if idx < count {
            meta_rows[idx] = (seed, regime);
        }
    }

    let mut scenes = Vec::with_capacity(count);
    for idx in 0..count {
        let [pv, pi, pcv, pci] = scene_paths(dir, idx);
        let v = pnm::read_ppm(&pv)?;
        let i = pnm::read_pgm(&pi)?;
        let cv = pnm::read_ppm(&pcv)?;
        let ci = pnm::read_pgm(&pci)?;
        for t in [&v, &i, &cv, &ci] {
            if t.dims()[1] != size || t.dims()[2] != size {
                return Err(Error::data(format!(
                    "scene {idx}: extent {:?} does not match corpus size {size}",
                    t.dims()
                )));
            }
        }
        scenes.push(Scene {
            size,
            image_v: v.to_vec(),
            image_i: i.to_vec(),
            clean_v: cv.to_vec(),
            clean_i: ci.to_vec(),
            boxes: boxes[idx].clone(),
            seed: meta_rows[idx].0,
            regime: meta_rows[idx].1,
        });
    }
    Ok(Corpus { scenes, size })
}
