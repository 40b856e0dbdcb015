//! Matrix product, row-bias, and softmax.

use super::Tensor;

fn mat_dims(t: &Tensor, role: &str) -> (usize, usize) {
    let d = t.dims();
    assert!(d.len() == 2, "{role} must be 2-D, got {:?}", d);
    (d[0], d[1])
}

/// C[m,n] += A[m,k] · B[k,n]
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row_out[j] += av * row_b[j];
            }
        }
    }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]
fn matmul_at_b(out: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            let row_out = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row_out[j] += av * row_b[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
fn matmul_a_bt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let row_a = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let row_b = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row_a[j] * row_b[j];
            }
            out[i * k + p] += s;
        }
    }
}

impl Tensor {
    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = mat_dims(self, "matmul lhs");
        let (k2, n) = mat_dims(other, "matmul rhs");
        assert!(
            k == k2,
            "matmul: inner dims differ, {:?} vs {:?}",
            self.dims(),
            other.dims()
        );
        let mut data = vec![0.0; m * n];
        self.with_data(|a| other.with_data(|b| matmul_acc(&mut data, a, b, m, k, n)));
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let a = ctx.parents[0].0.data.borrow();
                let b = ctx.parents[1].0.data.borrow();
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                ctx.parents[0].accumulate_grad(|g| matmul_a_bt(g, ctx.grad, &b, m, n, k));
                ctx.parents[1].accumulate_grad(|g| matmul_at_b(g, &a, ctx.grad, m, k, n));
            },
        )
    }

    /// Add a length-n bias to every row of an `[m,n]` matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Tensor {
        let (m, n) = mat_dims(self, "add_row_bias input");
        assert!(
            bias.dims() == [n],
            "add_row_bias: bias {:?} vs row width {}",
            bias.dims(),
            n
        );
        let data = self.with_data(|a| {
            bias.with_data(|b| {
                let mut out = a.to_vec();
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] += b[j];
                    }
                }
                out
            })
        });
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            move |ctx| {
                ctx.parents[0].accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                        *gi += d;
                    }
                });
                ctx.parents[1].accumulate_grad(|g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += ctx.grad[i * n + j];
                        }
                    }
                });
            },
        )
    }

    /// Max-stabilized softmax along one axis.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let dims = self.dims().to_vec();
        assert!(axis < dims.len(), "softmax axis {axis} for dims {:?}", dims);
        let axis_len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();

        let data = self.with_data(|x| {
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| o * axis_len * inner + a * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for a in 0..axis_len {
                        mx = mx.max(x[idx(a)]);
                    }
                    let mut z = 0.0;
                    for a in 0..axis_len {
                        let e = (x[idx(a)] - mx).exp();
                        out[idx(a)] = e;
                        z += e;
                    }
                    for a in 0..axis_len {
                        out[idx(a)] /= z;
                    }
                }
            }
            out
        });

        Tensor::from_op(dims, data, vec![self.clone()], move |ctx| {
            // dx = y ⊙ (dy − Σ y·dy) per lane
            ctx.parents[0].accumulate_grad(|g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| o * axis_len * inner + a * inner + i;
                        let mut dot = 0.0;
                        for a in 0..axis_len {
                            dot += ctx.data[idx(a)] * ctx.grad[idx(a)];
                        }
                        for a in 0..axis_len {
                            let j = idx(a);
                            g[j] += ctx.data[j] * (ctx.grad[j] - dot);
                        }
                    }
                }
            });
        })
    }
}
