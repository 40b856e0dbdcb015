//! Exact 2-D discrete Fourier analysis/synthesis and amplitude
//! extraction.
//!
//! Convention: forward transform is unnormalized (DC bin equals the
//! channel sum), the inverse carries the 1/(H·W) factor. Indices are
//! unshifted — the DC term lives at (0,0); fftshift is applied only
//! when rendering spectra for the eye.
//!
//! Power-of-two extents take a radix-2 row-column fast path; everything
//! else falls back to the naive O(N²) per-axis transform, which doubles
//! as the oracle for the fast path in the test suites.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel complex spectrum of a `[C, H, W]` image.
#[derive(Clone, Debug)]
pub struct ComplexSpectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn zeros(channels: usize, height: usize, width: usize) -> ComplexSpectrum {
        let n = channels * height * width;
        ComplexSpectrum {
            channels,
            height,
            width,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn bin(&self, c: usize, u: usize, v: usize) -> (f64, f64) {
        let i = (c * self.height + u) * self.width + v;
        (self.re[i], self.im[i])
    }

    /// Σ|F|² over all bins.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

fn is_pow2(n: usize) -> bool {
    n.is_power_of_two()
}

/// In-place radix-2 Cooley-Tukey on split re/im buffers.
/// `sign` is -1 for the forward transform, +1 for the inverse kernel.
fn fft_pow2(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    if n < 2 {
        return;
    }
    // bit reversal
    let mut j = 0usize;
    for i in 0..n - 1 {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
    // butterflies
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = cr * re[b] - ci * im[b];
                let ti = cr * im[b] + ci * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Naive O(N²) DFT of one line, used for non-power-of-two extents.
fn dft_naive(re: &[f64], im: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
    let n = re.len();
    let mut or_ = vec![0.0; n];
    let mut oi = vec![0.0; n];
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            let ang = sign * std::f64::consts::TAU * (k * t) as f64 / n as f64;
            let (c, s) = (ang.cos(), ang.sin());
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        or_[k] = sr;
        oi[k] = si;
    }
    (or_, oi)
}

fn transform_line(re: &mut [f64], im: &mut [f64], sign: f64) {
    if is_pow2(re.len()) {
        fft_pow2(re, im, sign);
    } else {
        let (r, i) = dft_naive(re, im, sign);
        re.copy_from_slice(&r);
        im.copy_from_slice(&i);
    }
}

/// Row-column 2-D transform of one H×W channel, in place.
fn transform_plane(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    for r in 0..h {
        transform_line(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], sign);
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_re[r] = re[r * w + c];
            col_im[r] = im[r * w + c];
        }
        transform_line(&mut col_re, &mut col_im, sign);
        for r in 0..h {
            re[r * w + c] = col_re[r];
            im[r * w + c] = col_im[r];
        }
    }
}

/// Forward 2-D DFT, applied independently per channel.
pub fn dft2(image: &Tensor) -> ComplexSpectrum {
    let d = image.dims();
    assert!(d.len() == 3, "dft2 expects [C,H,W], got {:?}", d);
    let (c, h, w) = (d[0], d[1], d[2]);
    let mut spec = ComplexSpectrum {
        channels: c,
        height: h,
        width: w,
        re: image.to_vec(),
        im: vec![0.0; c * h * w],
    };
    for ch in 0..c {
        let sl = ch * h * w..(ch + 1) * h * w;
        transform_plane(&mut spec.re[sl.clone()], &mut spec.im[sl], h, w, -1.0);
    }
    spec
}

/// Inverse kernel without the real-output residue check. Returns
/// (real, imag) spatial planes scaled by 1/(H·W).
fn idft2_complex(spec: &ComplexSpectrum) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut re = spec.re.clone();
    let mut im = spec.im.clone();
    let norm = 1.0 / (h * w) as f64;
    for ch in 0..c {
        let sl = ch * h * w..(ch + 1) * h * w;
        transform_plane(&mut re[sl.clone()], &mut im[sl], h, w, 1.0);
    }
    for v in re.iter_mut() {
        *v *= norm;
    }
    for v in im.iter_mut() {
        *v *= norm;
    }
    (re, im)
}

/// Inverse 2-D DFT of a conjugate-symmetric spectrum.
///
/// The imaginary residue is discarded after asserting it stays below
/// 1e-6; a larger residue means the spectrum was not the transform of a
/// real image and is reported as a numeric error.
pub fn idft2(spec: &ComplexSpectrum) -> Result<Tensor> {
    let (re, im) = idft2_complex(spec);
    let worst = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if worst >= 1e-6 {
        return Err(Error::numeric(format!(
            "inverse DFT of a supposedly-real image left imaginary residue {worst:.3e} (tolerance 1e-6)"
        )));
    }
    Ok(Tensor::new(&[spec.channels, spec.height, spec.width], re))
}

/// Inverse 2-D DFT keeping only the real part, for spectra that are not
/// conjugate-symmetric (e.g. after a patchwise filter).
pub fn idft2_real(spec: &ComplexSpectrum) -> Tensor {
    let (re, _) = idft2_complex(spec);
    Tensor::new(&[spec.channels, spec.height, spec.width], re)
}

/// Per-bin magnitude, `[C, H, W]`.
pub fn amplitude(spec: &ComplexSpectrum) -> Tensor {
    let data: Vec<f64> = spec
        .re
        .iter()
        .zip(&spec.im)
        .map(|(r, i)| (r * r + i * i).sqrt())
        .collect();
    Tensor::new(&[spec.channels, spec.height, spec.width], data)
}

/// Channel-averaged magnitude, `[1, H, W]` — the filter-prediction
/// encoder input.
pub fn amplitude_mean(spec: &ComplexSpectrum) -> Tensor {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            let r = spec.re[ch * h * w + i];
            let im = spec.im[ch * h * w + i];
            out[i] += (r * r + im * im).sqrt();
        }
    }
    let inv = 1.0 / c as f64;
    for v in out.iter_mut() {
        *v *= inv;
    }
    Tensor::new(&[1, h, w], out)
}

/// log(1+|F|) of one channel with the DC bin moved to the center,
/// scaled to [0,1] — the render-time view of a spectrum.
pub fn log_amplitude_shifted(spec: &ComplexSpectrum, channel: usize) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut out = vec![0.0; h * w];
    let mut peak = 0.0f64;
    for u in 0..h {
        for v in 0..w {
            let (r, i) = spec.bin(channel, u, v);
            let val = (1.0 + (r * r + i * i).sqrt()).ln();
            let su = (u + h / 2) % h;
            let sv = (v + w / 2) % w;
            out[su * w + sv] = val;
            peak = peak.max(val);
        }
    }
    if peak > 0.0 {
        for v in out.iter_mut() {
            *v /= peak;
        }
    }
    out
}
