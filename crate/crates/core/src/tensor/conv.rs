//! Spatial ops over `[C, H, W]` maps: convolution, pooling, nearest
//! resize, and the per-channel RMS normalization used inside blocks.

use super::Tensor;

fn chw(t: &Tensor, role: &str) -> (usize, usize, usize) {
    let d = t.dims();
    assert!(d.len() == 3, "{role} must be [C,H,W], got {:?}", d);
    (d[0], d[1], d[2])
}

/// Output extent of a strided window sweep; panics when it is not integral.
fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    let span = input + 2 * pad;
    assert!(span >= k, "kernel {k} exceeds padded input {span}");
    assert!(
        (span - k) % stride == 0,
        "non-integral output size: ({input} + 2*{pad} - {k}) not divisible by stride {stride}"
    );
    (span - k) / stride + 1
}

/// Range of output positions whose sampled input index stays in bounds
/// for a fixed kernel offset.
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize, isize) {
    let shift = k_off as isize - pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let max_in = in_len as isize - 1 - shift;
    if max_in < 0 {
        return (0, 0, shift);
    }
    let hi = ((max_in as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi, shift)
}

fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    (c_in, h, wd): (usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        if let Some(bias) = b {
            out[o * oh * ow..(o + 1) * oh * ow].fill(bias[o]);
        }
        for c in 0..c_in {
            let x_plane = &x[c * h * wd..(c + 1) * h * wd];
            for ki in 0..kh {
                let (r0, r1, rshift) = valid_range(oh, h, stride, pad, ki);
                for kj in 0..kw {
                    let wv = w[((o * c_in + c) * kh + ki) * kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (q0, q1, qshift) = valid_range(ow, wd, stride, pad, kj);
                    if q0 >= q1 {
                        continue;
                    }
                    for r in r0..r1 {
                        let ih = ((r * stride) as isize + rshift) as usize;
                        let x_row = &x_plane[ih * wd..(ih + 1) * wd];
                        let out_row = &mut out[(o * oh + r) * ow..(o * oh + r + 1) * ow];
                        if stride == 1 {
                            let src = &x_row[(q0 as isize + qshift) as usize..];
                            for (dst, &sv) in out_row[q0..q1].iter_mut().zip(src) {
                                *dst += wv * sv;
                            }
                        } else {
                            for q in q0..q1 {
                                let iw = ((q * stride) as isize + qshift) as usize;
                                out_row[q] += wv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl Tensor {
    /// 2-D cross-correlation of `[C,H,W]` by `[O,C,kh,kw]` with optional
    /// per-filter bias. Kernel extents must be odd.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let (c_in, h, w) = chw(self, "conv2d input");
        let kd = weight.dims();
        assert!(kd.len() == 4, "conv2d kernel must be [O,C,kh,kw], got {:?}", kd);
        let (c_out, kc, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
        assert!(
            kc == c_in,
            "conv2d: kernel channels {:?} vs input {:?}",
            kd,
            self.dims()
        );
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got {kh}x{kw}");
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        if let Some(b) = bias {
            assert!(b.dims() == [c_out], "conv2d: bias {:?} vs {} filters", b.dims(), c_out);
        }
        let oh = conv_extent(h, kh, stride, pad);
        let ow = conv_extent(w, kw, stride, pad);

        let data = self.with_data(|x| {
            weight.with_data(|wv| match bias {
                Some(b) => b.with_data(|bv| {
                    conv_forward(x, wv, Some(bv), (c_in, h, w), (c_out, kh, kw), stride, pad, oh, ow)
                }),
                None => conv_forward(x, wv, None, (c_in, h, w), (c_out, kh, kw), stride, pad, oh, ow),
            })
        });

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(vec![c_out, oh, ow], data, parents, move |ctx| {
            let x = ctx.parents[0].0.data.borrow();
            let wv = ctx.parents[1].0.data.borrow();
            let dy = ctx.grad;

            ctx.parents[0].accumulate_grad(|gx| {
                for o in 0..c_out {
                    for c in 0..c_in {
                        let gx_plane = &mut gx[c * h * w..(c + 1) * h * w];
                        for ki in 0..kh {
                            let (r0, r1, rshift) = valid_range(oh, h, stride, pad, ki);
                            for kj in 0..kw {
                                let wval = wv[((o * c_in + c) * kh + ki) * kw + kj];
                                if wval == 0.0 {
                                    continue;
                                }
                                let (q0, q1, qshift) = valid_range(ow, w, stride, pad, kj);
                                if q0 >= q1 {
                                    continue;
                                }
                                for r in r0..r1 {
                                    let ih = ((r * stride) as isize + rshift) as usize;
                                    let dy_row = &dy[(o * oh + r) * ow..(o * oh + r + 1) * ow];
                                    let gx_row = &mut gx_plane[ih * w..(ih + 1) * w];
                                    if stride == 1 {
                                        let dst = &mut gx_row[(q0 as isize + qshift) as usize..];
                                        for (gv, &dv) in dst.iter_mut().zip(&dy_row[q0..q1]) {
                                            *gv += wval * dv;
                                        }
                                    } else {
                                        for q in q0..q1 {
                                            let iw = ((q * stride) as isize + qshift) as usize;
                                            gx_row[iw] += wval * dy_row[q];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });

            ctx.parents[1].accumulate_grad(|gw| {
                for o in 0..c_out {
                    for c in 0..c_in {
                        let x_plane = &x[c * h * w..(c + 1) * h * w];
                        for ki in 0..kh {
                            let (r0, r1, rshift) = valid_range(oh, h, stride, pad, ki);
                            for kj in 0..kw {
                                let (q0, q1, qshift) = valid_range(ow, w, stride, pad, kj);
                                if q0 >= q1 {
                                    continue;
                                }
                                let mut s = 0.0;
                                for r in r0..r1 {
                                    let ih = ((r * stride) as isize + rshift) as usize;
                                    let dy_row = &dy[(o * oh + r) * ow..(o * oh + r + 1) * ow];
                                    let x_row = &x_plane[ih * w..(ih + 1) * w];
                                    if stride == 1 {
                                        let src = &x_row[(q0 as isize + qshift) as usize..];
                                        for (&dv, &sv) in dy_row[q0..q1].iter().zip(src) {
                                            s += dv * sv;
                                        }
                                    } else {
                                        for q in q0..q1 {
                                            let iw = ((q * stride) as isize + qshift) as usize;
                                            s += dy_row[q] * x_row[iw];
                                        }
                                    }
                                }
                                gw[((o * c_in + c) * kh + ki) * kw + kj] += s;
                            }
                        }
                    }
                }
            });

            if ctx.parents.len() == 3 {
                ctx.parents[2].accumulate_grad(|gb| {
                    for o in 0..c_out {
                        gb[o] += dy[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
            }
        })
    }

    /// Mean over non-overlapping `wh x ww` windows; windows must tile the map.
    pub fn avgpool2d(&self, wh: usize, ww: usize) -> Tensor {
        let (c, h, w) = chw(self, "avgpool2d input");
        assert!(
            wh >= 1 && ww >= 1 && h % wh == 0 && w % ww == 0,
            "avgpool2d: window {wh}x{ww} does not divide map {h}x{w}"
        );
        let (oh, ow) = (h / wh, w / ww);
        let inv = 1.0 / (wh * ww) as f64;
        let data = self.with_data(|x| {
            let mut out = vec![0.0; c * oh * ow];
            for ci in 0..c {
                for r in 0..oh {
                    for q in 0..ow {
                        let mut s = 0.0;
                        for i in 0..wh {
                            for j in 0..ww {
                                s += x[(ci * h + r * wh + i) * w + q * ww + j];
                            }
                        }
                        out[(ci * oh + r) * ow + q] = s * inv;
                    }
                }
            }
            out
        });
        Tensor::from_op(vec![c, oh, ow], data, vec![self.clone()], move |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for ci in 0..c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let d = ctx.grad[(ci * oh + r) * ow + q] * inv;
                            for i in 0..wh {
                                for j in 0..ww {
                                    g[(ci * h + r * wh + i) * w + q * ww + j] += d;
                                }
                            }
                        }
                    }
                }
            });
        })
    }

    /// Per-channel spatial mean, returned as a length-C vector.
    pub fn global_avgpool(&self) -> Tensor {
        let (c, h, w) = chw(self, "global_avgpool input");
        let inv = 1.0 / (h * w) as f64;
        let data = self.with_data(|x| {
            (0..c)
                .map(|ci| x[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() * inv)
                .collect::<Vec<_>>()
        });
        Tensor::from_op(vec![c], data, vec![self.clone()], move |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for ci in 0..c {
                    let d = ctx.grad[ci] * inv;
                    for gi in &mut g[ci * h * w..(ci + 1) * h * w] {
                        *gi += d;
                    }
                }
            });
        })
    }

    /// Nearest-neighbor resample to `oh x ow`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Tensor {
        let (c, h, w) = chw(self, "resize_nearest input");
        assert!(oh >= 1 && ow >= 1, "resize_nearest: degenerate target");
        if (oh, ow) == (h, w) {
            return self.reshape(&[c, h, w]);
        }
        let data = self.with_data(|x| {
            let mut out = vec![0.0; c * oh * ow];
            for ci in 0..c {
                for r in 0..oh {
                    let sr = r * h / oh;
                    for q in 0..ow {
                        let sq = q * w / ow;
                        out[(ci * oh + r) * ow + q] = x[(ci * h + sr) * w + sq];
                    }
                }
            }
            out
        });
        Tensor::from_op(vec![c, oh, ow], data, vec![self.clone()], move |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for ci in 0..c {
                    for r in 0..oh {
                        let sr = r * h / oh;
                        for q in 0..ow {
                            let sq = q * w / ow;
                            g[(ci * h + sr) * w + sq] += ctx.grad[(ci * oh + r) * ow + q];
                        }
                    }
                }
            });
        })
    }

    /// Per-channel RMS normalization with learnable gain:
    /// `y_c = gain_c * x_c / sqrt(mean(x_c^2) + eps)`.
    ///
    /// Stateless (no running statistics), so training and inference see
    /// identical arithmetic.
    pub fn channel_rms_norm(&self, gain: &Tensor, eps: f64) -> Tensor {
        let (c, h, w) = chw(self, "channel_rms_norm input");
        assert!(gain.dims() == [c], "channel_rms_norm: gain {:?} vs {} channels", gain.dims(), c);
        let n = (h * w) as f64;
        let data = self.with_data(|x| {
            gain.with_data(|g| {
                let mut out = vec![0.0; x.len()];
                for ci in 0..c {
                    let plane = &x[ci * h * w..(ci + 1) * h * w];
                    let ms = plane.iter().map(|v| v * v).sum::<f64>() / n;
                    let scale = g[ci] / (ms + eps).sqrt();
                    for (o, &v) in out[ci * h * w..(ci + 1) * h * w].iter_mut().zip(plane) {
                        *o = scale * v;
                    }
                }
                out
            })
        });
        Tensor::from_op(
            vec![c, h, w],
            data,
            vec![self.clone(), gain.clone()],
            move |ctx| {
                let x = ctx.parents[0].0.data.borrow();
                let gv = ctx.parents[1].0.data.borrow();
                let dy = ctx.grad;
                ctx.parents[0].accumulate_grad(|gx| {
                    for ci in 0..c {
                        let sl = ci * h * w..(ci + 1) * h * w;
                        let plane = &x[sl.clone()];
                        let dplane = &dy[sl.clone()];
                        let ms = plane.iter().map(|v| v * v).sum::<f64>() / n;
                        let s = (ms + eps).sqrt();
                        let dot: f64 = dplane.iter().zip(plane).map(|(d, v)| d * v).sum();
                        let k = gv[ci] * dot / (n * s * s * s);
                        let a = gv[ci] / s;
                        for (g_i, (&d, &v)) in gx[sl].iter_mut().zip(dplane.iter().zip(plane)) {
                            *g_i += a * d - k * v;
                        }
                    }
                });
                ctx.parents[1].accumulate_grad(|gg| {
                    for ci in 0..c {
                        let sl = ci * h * w..(ci + 1) * h * w;
                        let plane = &x[sl.clone()];
                        let ms = plane.iter().map(|v| v * v).sum::<f64>() / n;
                        let s = (ms + eps).sqrt();
                        let dot: f64 = dy[sl].iter().zip(plane).map(|(d, v)| d * v).sum();
                        gg[ci] += dot / s;
                    }
                });
            },
        )
    }
}
