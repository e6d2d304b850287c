//! Minimal reverse-mode autodiff over `f64` ndarrays.
//!
//! Every model in this crate runs on this tape: dynamic graph, 64-bit
//! everywhere, deterministic evaluation order. The op set is exactly what
//! the encoder/decoder/heads need; each op carries its analytic backward
//! and is covered by finite-difference tests.

mod conv;
mod param;
mod sample;

pub use param::{Init, ParamStore};
pub use sample::bilinear_weights;

use ndarray::{ArrayD, Axis, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` with gradient tracking disabled (inference / frozen trunk).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Tensor])>;

pub(crate) struct Inner {
    id: u64,
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    pub fn new(value: ArrayD<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn constant(value: ArrayD<f64>) -> Self {
        Tensor::new(value, false)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Build an op node. `parents` that require grad make this node require grad;
    /// when tracking is off (or no parent needs it) the node degenerates to a leaf.
    pub(crate) fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if !track {
            return Tensor::constant(value);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        self.inner.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.inner.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar extraction; panics if the tensor is not 0-d / length-1.
    pub fn item(&self) -> f64 {
        let v = self.inner.value.borrow();
        debug_assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        *v.iter().next().expect("empty tensor")
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the stored value in place (parameter updates, checkpoint load).
    pub fn set_value(&self, value: ArrayD<f64>) {
        let mut v = self.inner.value.borrow_mut();
        assert_eq!(v.shape(), value.shape(), "set_value shape mismatch");
        *v = value;
    }

    /// A new leaf sharing this tensor's current value, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    pub(crate) fn accumulate_grad(&self, g: &ArrayD<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.clone()),
        }
    }

    /// Reverse pass from a scalar output. Seeds d(out)/d(out) = 1 and walks the
    /// graph in reverse creation order, which is a valid topological order.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        self.accumulate_grad(&ArrayD::from_elem(self.inner.value.borrow().raw_dim(), 1.0));

        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.requires_grad {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        for node in &nodes {
            let grad = node.inner.grad.borrow().clone();
            if let (Some(g), Some(back)) = (grad, node.inner.backward.as_ref()) {
                back(&g, &node.inner.parents);
            }
        }
    }
}

fn binary_shapes_match(a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "elementwise op on mismatched shapes {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

// Elementwise arithmetic.
impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_shapes_match(self, other);
        let value = &*self.value() + &*other.value();
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_shapes_match(self, other);
        let value = &*self.value() - &*other.value();
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(&(-g));
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_shapes_match(self, other);
        let value = &*self.value() * &*other.value();
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                let a = parents[0].to_array();
                let b = parents[1].to_array();
                parents[0].accumulate_grad(&(g * &b));
                parents[1].accumulate_grad(&(g * &a));
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary_shapes_match(self, other);
        let value = &*self.value() / &*other.value();
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                let a = parents[0].to_array();
                let b = parents[1].to_array();
                parents[0].accumulate_grad(&(g / &b));
                parents[1].accumulate_grad(&(-(g * &a) / (&b * &b)));
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let value = self.value().mapv(|x| x + s);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accumulate_grad(g)),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let value = self.value().mapv(|x| x * s);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| parents[0].accumulate_grad(&(g * s))),
        )
    }

    /// Elementwise maximum with a constant; subgradient 0 at/below the floor.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        let input = self.to_array();
        let value = input.mapv(|x| x.max(floor));
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].to_array();
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(&x).for_each(|gi, &xi| {
                    if xi <= floor {
                        *gi = 0.0;
                    }
                });
                parents[0].accumulate_grad(&gx);
            }),
        )
    }
}

// Unary nonlinearities.
impl Tensor {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        let value = self.value().mapv(&f);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].to_array();
                let gx = ndarray::Zip::from(g).and(&x).map_collect(|&gi, &xi| gi * dfdx(xi));
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    /// softplus(x) = ln(1 + e^x), computed stably.
    pub fn softplus(&self) -> Tensor {
        self.unary(softplus, sigmoid)
    }

    /// tanh-form GELU; smooth, so finite-difference checks stay clean.
    pub fn gelu(&self) -> Tensor {
        self.unary(gelu, gelu_prime)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |x| 1.0 - x.tanh().powi(2))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// Shape ops.
impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let orig: Vec<usize> = self.shape();
        let value = self
            .value()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gr = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape backward");
                parents[0].accumulate_grad(&gr);
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let axes_owned = axes.to_vec();
        let value = self
            .value()
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                // invert the permutation
                let mut inv = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inv[a] = i;
                }
                let gr = g
                    .clone()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                parents[0].accumulate_grad(&gr);
            }),
        )
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<ArrayD<f64>> = parts.iter().map(|p| p.to_array()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &view_refs).expect("concat");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            value,
            parts.to_vec(),
            Box::new(move |g, parents| {
                let mut start = 0usize;
                for (p, &sz) in parents.iter().zip(&sizes) {
                    let chunk = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                        .to_owned();
                    p.accumulate_grad(&chunk);
                    start += sz;
                }
            }),
        )
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let full = self.shape();
        let value = self
            .value()
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gr = ArrayD::<f64>::zeros(IxDyn(&full));
                gr.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end))
                    .assign(g);
                parents[0].accumulate_grad(&gr);
            }),
        )
    }

    /// Gather sub-arrays along `axis` (duplicates allowed); grads scatter-add back.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor {
        let idx = indices.to_vec();
        let full = self.shape();
        let value = self.value().select(Axis(axis), indices);
        Tensor::from_op(
            value.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gr = ArrayD::<f64>::zeros(IxDyn(&full));
                for (pos, &i) in idx.iter().enumerate() {
                    let gslice = g.index_axis(Axis(axis), pos);
                    let mut dst = gr.index_axis_mut(Axis(axis), i);
                    dst += &gslice;
                }
                parents[0].accumulate_grad(&gr);
            }),
        )
    }

    pub fn stack(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let arrays: Vec<ArrayD<f64>> = parts.iter().map(|p| p.to_array()).collect();
        let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
        let value = ndarray::stack(Axis(axis), &views).expect("stack");
        Tensor::from_op(
            value,
            parts.to_vec(),
            Box::new(move |g, parents| {
                for (pos, p) in parents.iter().enumerate() {
                    let chunk = g.index_axis(Axis(axis), pos).to_owned();
                    p.accumulate_grad(&chunk);
                }
            }),
        )
    }
}

// Reductions.
impl Tensor {
    pub fn sum(&self) -> Tensor {
        let shape = self.shape();
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gv = g.iter().next().copied().unwrap_or(0.0);
                parents[0].accumulate_grad(&ArrayD::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let full = self.shape();
        let value = self.value().sum_axis(Axis(axis));
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gr = ArrayD::<f64>::zeros(IxDyn(&full));
                for mut lane in gr.axis_iter_mut(Axis(axis)) {
                    lane += g;
                }
                parents[0].accumulate_grad(&gr);
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).mul_scalar(1.0 / n)
    }

    pub fn dot(&self, other: &Tensor) -> Tensor {
        self.mul(other).sum()
    }
}

// Linear algebra and token-level ops.
impl Tensor {
    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.to_array().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs 2d");
        let b = other.to_array().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs 2d");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dims");
        let value = a.dot(&b).into_dyn();
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                let a = parents[0]
                    .to_array()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let b = parents[1]
                    .to_array()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let g2 = g.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
                parents[0].accumulate_grad(&g2.dot(&b.t()).into_dyn());
                parents[1].accumulate_grad(&a.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// Row-broadcast bias add: self is [..., D], bias is [D].
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let d = *self.shape().last().expect("add_bias on 0-d");
        assert_eq!(bias.shape(), vec![d], "bias must match last dim");
        let mut value = self.to_array();
        {
            let b = bias.value();
            let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for mut row in value.rows_mut() {
                row += &b1;
            }
        }
        Tensor::from_op(
            value,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g);
                let mut gb = ndarray::Array1::<f64>::zeros(d);
                for row in g.rows() {
                    gb += &row;
                }
                parents[1].accumulate_grad(&gb.into_dyn());
            }),
        )
    }

    /// x[..., in] @ w[in, out] + b[out], flattening leading dims.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Tensor {
        let shape = self.shape();
        let d_in = *shape.last().expect("linear on 0-d");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(&[rows, d_in]);
        let mut out = flat.matmul(w);
        if let Some(b) = b {
            out = out.add_bias(b);
        }
        let d_out = w.shape()[1];
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(d_out);
        out.reshape(&out_shape)
    }

    /// Softmax over the last axis with an optional additive bias (mask) of the
    /// same shape. A detached row-max keeps the exponentials stable; softmax is
    /// shift invariant, so the gradient is unaffected.
    pub fn softmax_last(&self) -> Tensor {
        let x = self.to_array();
        let y = softmax_last_array(&x);
        let y_saved = y.clone();
        Tensor::from_op(
            y,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx = softmax_backward(&y_saved, g);
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    pub fn log_softmax_last(&self) -> Tensor {
        let x = self.to_array();
        let y = softmax_last_array(&x);
        let value = y.mapv(|p| p.max(f64::MIN_POSITIVE).ln());
        let y_saved = y;
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents| {
                // d log_softmax = g - softmax * sum(g) per row
                let d = *g.shape().last().unwrap();
                let rows = g.len() / d;
                let g2 = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[rows, d]))
                    .unwrap();
                let y2 = y_saved
                    .clone()
                    .into_shape_with_order(IxDyn(&[rows, d]))
                    .unwrap();
                let mut gx = g2.clone();
                for r in 0..rows {
                    let gsum: f64 = g2.index_axis(Axis(0), r).sum();
                    let mut row = gx.index_axis_mut(Axis(0), r);
                    let yrow = y2.index_axis(Axis(0), r);
                    ndarray::Zip::from(&mut row).and(&yrow).for_each(|gi, &yi| {
                        *gi -= yi * gsum;
                    });
                }
                let gx = gx.into_shape_with_order(g.raw_dim()).unwrap();
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// LayerNorm over the last axis with learned gain/offset.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let shape = self.shape();
        let d = *shape.last().expect("layer_norm on 0-d");
        assert_eq!(gamma.shape(), vec![d]);
        assert_eq!(beta.shape(), vec![d]);
        let x = self.to_array();
        let rows = x.len() / d;
        let x2 = x
            .into_shape_with_order((rows, d))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();

        let mut xhat = ndarray::Array2::<f64>::zeros((rows, d));
        let mut inv_std = vec![0.0f64; rows];
        for r in 0..rows {
            let row = x2.index_axis(Axis(0), r);
            let mu = row.sum() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            let mut out = xhat.index_axis_mut(Axis(0), r);
            ndarray::Zip::from(&mut out).and(&row).for_each(|o, &v| {
                *o = (v - mu) * istd;
            });
        }
        let g1 = gamma
            .to_array()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let b1 = beta
            .to_array()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((rows, d));
        for r in 0..rows {
            let xh = xhat.index_axis(Axis(0), r);
            let mut out = value.index_axis_mut(Axis(0), r);
            ndarray::Zip::from(&mut out)
                .and(&xh)
                .and(&g1)
                .and(&b1)
                .for_each(|o, &xh, &gm, &bt| *o = xh * gm + bt);
        }
        let xhat_saved = xhat;
        let istd_saved = inv_std;
        let out_shape = shape.clone();
        Tensor::from_op(
            value.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                let gflat = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[xhat_saved.nrows(), xhat_saved.ncols()]))
                    .unwrap();
                let gm = parents[1]
                    .to_array()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let rows = xhat_saved.nrows();
                let d = xhat_saved.ncols();
                let mut gx = ndarray::Array2::<f64>::zeros((rows, d));
                let mut ggamma = ndarray::Array1::<f64>::zeros(d);
                let mut gbeta = ndarray::Array1::<f64>::zeros(d);
                for r in 0..rows {
                    let grow = gflat.index_axis(Axis(0), r);
                    let xh = xhat_saved.index_axis(Axis(0), r);
                    for c in 0..d {
                        ggamma[c] += grow[c] * xh[c];
                        gbeta[c] += grow[c];
                    }
                    // dx = istd/d * (d*gy*gamma - sum(gy*gamma) - xhat * sum(gy*gamma*xhat))
                    let mut gyg = vec![0.0f64; d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..d {
                        gyg[c] = grow[c] * gm[c];
                        s1 += gyg[c];
                        s2 += gyg[c] * xh[c];
                    }
                    let istd = istd_saved[r];
                    let mut out = gx.index_axis_mut(Axis(0), r);
                    for c in 0..d {
                        out[c] = istd / d as f64 * (d as f64 * gyg[c] - s1 - xh[c] * s2);
                    }
                }
                parents[0].accumulate_grad(
                    &gx.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap(),
                );
                parents[1].accumulate_grad(&ggamma.into_dyn());
                parents[2].accumulate_grad(&gbeta.into_dyn());
            }),
        )
    }
}

pub(crate) fn softmax_last_array(x: &ArrayD<f64>) -> ArrayD<f64> {
    let d = *x.shape().last().expect("softmax on 0-d");
    let rows = x.len() / d;
    let x2 = x
        .to_owned()
        .into_shape_with_order(IxDyn(&[rows, d]))
        .unwrap();
    let mut y = ndarray::Array2::<f64>::zeros((rows, d));
    for r in 0..rows {
        let row = x2.index_axis(Axis(0), r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut out = y.index_axis_mut(Axis(0), r);
        for c in 0..d {
            let e = (row[c] - m).exp();
            out[c] = e;
            sum += e;
        }
        for c in 0..d {
            out[c] /= sum;
        }
    }
    y.into_dyn().into_shape_with_order(x.raw_dim()).unwrap()
}

fn softmax_backward(y: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    let d = *y.shape().last().unwrap();
    let rows = y.len() / d;
    let y2 = y
        .to_owned()
        .into_shape_with_order(IxDyn(&[rows, d]))
        .unwrap();
    let g2 = g
        .to_owned()
        .into_shape_with_order(IxDyn(&[rows, d]))
        .unwrap();
    let mut gx = ndarray::Array2::<f64>::zeros((rows, d));
    for r in 0..rows {
        let yr = y2.index_axis(Axis(0), r);
        let gr = g2.index_axis(Axis(0), r);
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
        let mut out = gx.index_axis_mut(Axis(0), r);
        for c in 0..d {
            out[c] = yr[c] * (gr[c] - dot);
        }
    }
    gx.into_dyn().into_shape_with_order(y.raw_dim()).unwrap()
}
