//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Every operation builds a fresh node in a dynamically-grown graph;
//! [`Tensor::backward`] walks the graph once in reverse topological
//! order and accumulates gradients into the leaves that requested them.
//! The graph is dropped with the tensors that reference it, so each
//! forward pass starts from a clean slate.
//!
//! Values are immutable after construction; the one sanctioned
//! exception is [`crate::optim::Sgd`] updating leaf parameters between
//! passes. Shape misuse panics with a message naming both shapes —
//! those are caller bugs, not runtime conditions.

mod conv;
mod linalg;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&OpCtx)>;

struct Node {
    dims: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense row-major f64 tensor, cheap to clone (shared node).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

/// View of an op's output handed to its backward closure.
pub(crate) struct OpCtx<'a> {
    pub dims: &'a [usize],
    pub data: &'a [f64],
    pub grad: &'a [f64],
    pub parents: &'a [Tensor],
}

fn check_len(dims: &[usize], len: usize) {
    let n: usize = dims.iter().product();
    assert!(
        n == len && dims.iter().all(|&d| d > 0),
        "dims {:?} do not describe a buffer of {} elements",
        dims,
        len
    );
}

impl Tensor {
    /// Constant tensor; no gradient flows into it.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Tensor {
        check_len(dims, data.len());
        Tensor(Rc::new(Node {
            dims: dims.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Gradient-tracked leaf (parameters, or test probes).
    pub fn leaf(dims: &[usize], data: Vec<f64>) -> Tensor {
        check_len(dims, data.len());
        Tensor(Rc::new(Node {
            dims: dims.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor::new(dims, vec![0.0; dims.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    pub(crate) fn from_op(
        dims: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&OpCtx) + 'static,
    ) -> Tensor {
        check_len(&dims, data.len());
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if requires_grad {
            Tensor(Rc::new(Node {
                dims,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(Box::new(backward)),
            }))
        } else {
            // Constant subgraph: keep the value, drop the tape.
            Tensor::new(&dims, data)
        }
    }

    /// Accumulate into a tensor's gradient buffer (no-op for constants).
    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [f64])) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.len()]);
        f(buf);
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.dims
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Borrowed view of the value buffer (crate-internal op kernels).
    pub(crate) fn data_ref(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Run a closure over the value buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.0.data.borrow())
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert!(d.len() == 1, "item() on tensor of dims {:?}", self.0.dims);
        d[0]
    }

    /// Copy of the gradient, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// In-place value update; reserved for the optimizer and loaders.
    pub(crate) fn set_data(&self, new: Vec<f64>) {
        assert_eq!(new.len(), self.len(), "set_data length mismatch");
        *self.0.data.borrow_mut() = new;
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Leaf gradients accumulate across calls until [`Tensor::zero_grad`];
    /// interior gradients are reset at the start of every sweep.
    pub fn backward(&self) {
        assert!(
            self.len() == 1,
            "backward() needs a scalar loss, got dims {:?}",
            self.0.dims
        );
        if !self.0.requires_grad {
            return;
        }

        // Postorder over the grad-requiring subgraph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                stack.push((node.clone(), child + 1));
                let p = node.0.parents[child].clone();
                if p.0.requires_grad && !visited.contains(&p.ptr()) {
                    visited.insert(p.ptr());
                    stack.push((p, 0));
                }
            } else {
                order.push(node);
            }
        }

        // Interior grads are per-sweep scratch; leaves persist.
        for t in &order {
            if t.0.backward.is_some() {
                *t.0.grad.borrow_mut() = Some(vec![0.0; t.len()]);
            }
        }
        self.accumulate_grad(|g| g[0] += 1.0);

        for t in order.iter().rev() {
            let Some(f) = &t.0.backward else { continue };
            let data = t.0.data.borrow();
            let grad_slot = t.0.grad.borrow();
            let ctx = OpCtx {
                dims: &t.0.dims,
                data: &data,
                grad: grad_slot.as_ref().expect("grad seeded in sweep"),
                parents: &t.0.parents,
            };
            f(&ctx);
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.0.dims)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Named gradient-tracked tensor; names key checkpoints and must be
/// unique within a model.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Parameter {
        Parameter {
            name: name.into(),
            tensor: Tensor::leaf(dims, data),
        }
    }
}

fn assert_same_dims(a: &Tensor, b: &Tensor, op: &str) {
    assert!(
        a.dims() == b.dims(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.dims(),
        b.dims()
    );
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_dims(self, other, "add");
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>())
        });
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                ctx.parents[0].accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                        *gi += d;
                    }
                });
                ctx.parents[1].accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                        *gi += d;
                    }
                });
            },
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_dims(self, other, "sub");
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
        });
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                ctx.parents[0].accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                        *gi += d;
                    }
                });
                ctx.parents[1].accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                        *gi -= d;
                    }
                });
            },
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_dims(self, other, "mul");
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>())
        });
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                let a = ctx.parents[0].0.data.borrow();
                let b = ctx.parents[1].0.data.borrow();
                ctx.parents[0].accumulate_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * b[i];
                    }
                });
                ctx.parents[1].accumulate_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * a[i];
                    }
                });
            },
        )
    }

    /// Multiply by a plain scalar.
    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x * s).collect::<Vec<_>>());
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            move |ctx| {
                ctx.parents[0].accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                        *gi += s * d;
                    }
                });
            },
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x + s).collect::<Vec<_>>());
        Tensor::from_op(self.dims().to_vec(), data, vec![self.clone()], |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                    *gi += d;
                }
            });
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x.ln()).collect::<Vec<_>>());
        Tensor::from_op(self.dims().to_vec(), data, vec![self.clone()], |ctx| {
            let a = ctx.parents[0].0.data.borrow();
            ctx.parents[0].accumulate_grad(|g| {
                for i in 0..g.len() {
                    g[i] += ctx.grad[i] / a[i];
                }
            });
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|&x| sigmoid(x)).collect::<Vec<_>>());
        Tensor::from_op(self.dims().to_vec(), data, vec![self.clone()], |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for i in 0..g.len() {
                    let y = ctx.data[i];
                    g[i] += ctx.grad[i] * y * (1.0 - y);
                }
            });
        })
    }

    /// SiLU (x * sigmoid(x)) — the smooth nonlinearity used throughout.
    pub fn silu(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|&x| x * sigmoid(x)).collect::<Vec<_>>());
        Tensor::from_op(self.dims().to_vec(), data, vec![self.clone()], |ctx| {
            let a = ctx.parents[0].0.data.borrow();
            ctx.parents[0].accumulate_grad(|g| {
                for i in 0..g.len() {
                    let s = sigmoid(a[i]);
                    g[i] += ctx.grad[i] * (s + a[i] * s * (1.0 - s));
                }
            });
        })
    }

    pub fn sum(&self) -> Tensor {
        let total = self.with_data(|a| a.iter().sum::<f64>());
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for gi in g.iter_mut() {
                    *gi += ctx.grad[0];
                }
            });
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, dims: &[usize]) -> Tensor {
        check_len(dims, self.len());
        let data = self.to_vec();
        Tensor::from_op(dims.to_vec(), data, vec![self.clone()], |ctx| {
            ctx.parents[0].accumulate_grad(|g| {
                for (gi, &d) in g.iter_mut().zip(ctx.grad) {
                    *gi += d;
                }
            });
        })
    }

    pub fn flatten(&self) -> Tensor {
        let n = self.len();
        self.reshape(&[n])
    }

    /// Concatenate `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_channels: empty input");
        let (h, w) = (parts[0].dims()[1], parts[0].dims()[2]);
        let mut total_c = 0;
        for p in parts {
            assert!(
                p.dims().len() == 3 && p.dims()[1] == h && p.dims()[2] == w,
                "concat_channels: incompatible dims {:?} vs [_, {}, {}]",
                p.dims(),
                h,
                w
            );
            total_c += p.dims()[0];
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for p in parts {
            p.with_data(|d| data.extend_from_slice(d));
        }
        Tensor::from_op(vec![total_c, h, w], data, parts.to_vec(), |ctx| {
            let mut offset = 0;
            for p in ctx.parents {
                let n = p.len();
                p.accumulate_grad(|g| {
                    for (gi, &d) in g.iter_mut().zip(&ctx.grad[offset..offset + n]) {
                        *gi += d;
                    }
                });
                offset += n;
            }
        })
    }

    /// Channel slice `[lo, hi)` of a `[C, H, W]` map.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Tensor {
        let dims = self.dims();
        assert!(dims.len() == 3, "slice_channels on dims {:?}", dims);
        assert!(lo < hi && hi <= dims[0], "slice [{lo},{hi}) of {:?}", dims);
        let plane = dims[1] * dims[2];
        let data = self.with_data(|d| d[lo * plane..hi * plane].to_vec());
        Tensor::from_op(
            vec![hi - lo, dims[1], dims[2]],
            data,
            vec![self.clone()],
            move |ctx| {
                ctx.parents[0].accumulate_grad(|g| {
                    for (i, &d) in ctx.grad.iter().enumerate() {
                        g[lo * plane + i] += d;
                    }
                });
            },
        )
    }

    /// `w[index] * x` where `w` is a small weight vector — ties a gate
    /// weight into a feature map with gradient to both sides.
    pub fn scale_by_entry(&self, weights: &Tensor, index: usize) -> Tensor {
        assert!(index < weights.len(), "scale_by_entry index out of range");
        let w = weights.with_data(|d| d[index]);
        let data = self.with_data(|a| a.iter().map(|x| x * w).collect::<Vec<_>>());
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), weights.clone()],
            move |ctx| {
                let x = ctx.parents[0].0.data.borrow();
                ctx.parents[0].accumulate_grad(|g| {
                    for i in 0..g.len() {
                        g[i] += ctx.grad[i] * w;
                    }
                });
                let dot: f64 = ctx.grad.iter().zip(x.iter()).map(|(d, xv)| d * xv).sum();
                ctx.parents[1].accumulate_grad(|g| {
                    g[index] += dot;
                });
            },
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]);
        let b = Tensor::new(&[2], vec![3.0, 4.0]);
        assert_eq!(a.add(&b).to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn scale_halves() {
        let a = Tensor::new(&[2], vec![2.0, 4.0]);
        assert_eq!(a.scale(0.5).to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn mul_by_zero_zeroes_value_and_grad() {
        let x = Tensor::leaf(&[3], vec![1.0, -2.0, 3.0]);
        let z = Tensor::new(&[3], vec![0.0; 3]);
        let y = x.mul(&z);
        assert_eq!(y.to_vec(), vec![0.0; 3]);
        y.sum().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch [2] vs [3]")]
    fn add_shape_mismatch_names_both_shapes() {
        let a = Tensor::new(&[2], vec![0.0; 2]);
        let b = Tensor::new(&[3], vec![0.0; 3]);
        let _ = a.add(&b);
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::leaf(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        x.sum().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn sum_of_squares_backward_is_2x() {
        let x = Tensor::leaf(&[3], vec![1.0, -2.0, 0.5]);
        x.mul(&x).sum().backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn fanout_sums_both_paths() {
        // y = x*x + 3x  =>  dy/dx = 2x + 3
        let x = Tensor::leaf(&[1], vec![5.0]);
        let y = x.mul(&x).add(&x.scale(3.0));
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![13.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]);
        let y = x.sum();
        y.backward();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constant_subgraphs_are_pruned() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]);
        let b = Tensor::new(&[2], vec![3.0, 4.0]);
        let y = a.add(&b);
        assert!(!y.requires_grad());
    }

    #[test]
    fn slice_concat_roundtrip_gradients() {
        let x = Tensor::leaf(&[4, 2, 2], (0..16).map(|i| i as f64).collect());
        let lo = x.slice_channels(0, 2);
        let hi = x.slice_channels(2, 4);
        let y = Tensor::concat_channels(&[lo, hi]);
        assert_eq!(y.to_vec(), x.to_vec());
        y.sum().backward();
        assert_eq!(x.grad().unwrap(), vec![1.0; 16]);
    }

    #[test]
    fn scale_by_entry_routes_gradient_to_weight() {
        let x = Tensor::leaf(&[2], vec![3.0, 4.0]);
        let w = Tensor::leaf(&[2], vec![0.25, 0.75]);
        let y = x.scale_by_entry(&w, 1);
        assert_eq!(y.to_vec(), vec![2.25, 3.0]);
        y.sum().backward();
        assert_eq!(x.grad().unwrap(), vec![0.75, 0.75]);
        assert_eq!(w.grad().unwrap(), vec![0.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "backward() needs a scalar loss")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]);
        x.scale(2.0).backward();
    }
}
