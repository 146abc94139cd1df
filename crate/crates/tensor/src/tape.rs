//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. [`Var`] is a
//! cheap copyable handle into it. Calling [`Tape::backward`] on a scalar
//! produces the gradient of that scalar with respect to every parameter leaf.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::array::{numel, Array};
use crate::kernels::{self, ConvGeom};

/// Variance floor added inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqr(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    LogSumExpAxis { x: usize, axis: usize },
    Broadcast(usize),
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Matmul(usize, usize),
    Conv { x: usize, w: usize, geom: ConvGeom, dims: [usize; 3], kernel: [usize; 3], out: [usize; 3] },
    AvgPool { x: usize, kernel: [usize; 3], dims: [usize; 3] },
    Upsample2x(usize),
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// How a batch-norm layer normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a batch seen by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each channel statistic was computed from.
    pub count: usize,
}

/// Gradients of a scalar with respect to the tape's parameter leaves.
pub struct Grads {
    grads: Vec<Option<Array>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Array> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Array> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn conv_dims(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        4 => [1, shape[2], shape[3]],
        5 => [shape[2], shape[3], shape[4]],
        r => panic!("convolution expects rank 4 or 5, got rank {r}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        // Ops whose inputs are all constants are folded into constant leaves.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Rc<Array> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Grads { grads };
        }
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape().to_vec(), 1.0));

        let acc = |grads: &mut Vec<Option<Array>>, id: usize, g: Array| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, zip(&g, vb, |g, y| g * y));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, zip(&g, va, |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, zip(&g, vb, |g, y| g / y));
                    }
                    if nodes[*b].requires_grad {
                        let gb = zip3(&g, va, vb, |g, x, y| -g * x / (y * y));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|v| v * k)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Exp(a) => acc(&mut grads, *a, zip(&g, out, |g, y| g * y)),
                Op::Log(a) => acc(&mut grads, *a, zip(&g, val(*a), |g, x| g / x)),
                Op::Sqr(a) => acc(&mut grads, *a, zip(&g, val(*a), |g, x| 2.0 * g * x)),
                Op::Relu(a) => acc(&mut grads, *a, zip(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, out, |g, y| g * y * (1.0 - y))),
                Op::Softplus(a) => acc(&mut grads, *a, zip(&g, val(*a), |g, x| g * kernels::sigmoid(x))),
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(&mut grads, *a, Array::full(val(*a).shape().to_vec(), gv));
                }
                Op::SumAxis { x, axis } => {
                    let shape = val(*x).shape().to_vec();
                    let (outer, len, inner) = Array::axis_split(&shape, *axis);
                    let mut gx = vec![0.0; outer * len * inner];
                    let gd = g.data();
                    for o in 0..outer {
                        for l in 0..len {
                            gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                                .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(&mut grads, *x, Array::new(shape, gx));
                }
                Op::LogSumExpAxis { x, axis } => {
                    let xv = val(*x);
                    let shape = xv.shape().to_vec();
                    let (outer, len, inner) = Array::axis_split(&shape, *axis);
                    let mut gx = vec![0.0; outer * len * inner];
                    let (xd, od, gd) = (xv.data(), out.data(), g.data());
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let k = (o * len + l) * inner + i;
                                gx[k] = gd[o * inner + i] * (xd[k] - od[o * inner + i]).exp();
                            }
                        }
                    }
                    acc(&mut grads, *x, Array::new(shape, gx));
                }
                Op::Broadcast(a) => {
                    let src_shape = val(*a).shape().to_vec();
                    let mut gs = vec![0.0; numel(&src_shape)];
                    let gd = g.data();
                    kernels::for_each_broadcast(&src_shape, out.shape(), |d, s| gs[s] += gd[d]);
                    acc(&mut grads, *a, Array::new(src_shape, gs));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(&mut grads, *a, g.reshape(shape));
                }
                Op::Narrow { x, axis, start } => {
                    let shape = val(*x).shape().to_vec();
                    let (outer, len, inner) = Array::axis_split(&shape, *axis);
                    let n = out.shape()[*axis];
                    let mut gx = vec![0.0; outer * len * inner];
                    let gd = g.data();
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        gx[dst..dst + n * inner].copy_from_slice(&gd[o * n * inner..(o + 1) * n * inner]);
                    }
                    acc(&mut grads, *x, Array::new(shape, gx));
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = Array::axis_split(out.shape(), *axis);
                    let gd = g.data();
                    let mut offset = 0;
                    for &x in xs {
                        let shape = val(x).shape().to_vec();
                        let len = shape[*axis];
                        if nodes[x].requires_grad {
                            let mut gx = vec![0.0; outer * len * inner];
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                gx[o * len * inner..(o + 1) * len * inner]
                                    .copy_from_slice(&gd[src..src + len * inner]);
                            }
                            acc(&mut grads, x, Array::new(shape, gx));
                        }
                        offset += len;
                    }
                }
                Op::Matmul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut ga);
                        acc(&mut grads, *a, Array::new(vec![m, k], ga));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut gb);
                        acc(&mut grads, *b, Array::new(vec![k, n], gb));
                    }
                }
                Op::Conv { x, w, geom, dims, kernel, out: od } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (gx, gw) = conv_backward(&xv, &wv, &g, geom, *dims, *kernel, *od, nodes[*x].requires_grad);
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    acc(&mut grads, *w, gw);
                }
                Op::AvgPool { x, kernel, dims } => {
                    let shape = val(*x).shape().to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let mut gx = vec![0.0; numel(&shape)];
                    kernels::avg_pool_same_backward(g.data(), n * c, *dims, *kernel, &mut gx);
                    acc(&mut grads, *x, Array::new(shape, gx));
                }
                Op::Upsample2x(a) => {
                    let shape = val(*a).shape().to_vec();
                    let r = shape.len();
                    let (h, w) = (shape[r - 2], shape[r - 1]);
                    let planes = numel(&shape[..r - 2]);
                    let mut gx = vec![0.0; numel(&shape)];
                    let gd = g.data();
                    for p in 0..planes {
                        let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                            }
                        }
                    }
                    acc(&mut grads, *a, Array::new(shape, gx));
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let shape = val(*x).shape().to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let s = numel(&shape[2..]);
                    let m = (n * s) as f64;
                    let gam = val(*gamma);
                    let gd = g.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            for i in off..off + s {
                                dbeta[ch] += gd[i];
                                dgamma[ch] += gd[i] * xhat[i];
                            }
                        }
                    }
                    if nodes[*x].requires_grad {
                        let mut gx = vec![0.0; n * c * s];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * s;
                                let k = gam.data()[ch] * inv_std[ch];
                                for i in off..off + s {
                                    gx[i] = if *train {
                                        k / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                    } else {
                                        k * gd[i]
                                    };
                                }
                            }
                        }
                        acc(&mut grads, *x, Array::new(shape, gx));
                    }
                    acc(&mut grads, *gamma, Array::new(vec![c], dgamma));
                    acc(&mut grads, *beta, Array::new(vec![c], dbeta));
                }
            }
        }

        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Grads { grads }
    }
}

fn zip(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Array::new(g.shape().to_vec(), data)
}

fn zip3(g: &Array, x: &Array, y: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Array {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect();
    Array::new(g.shape().to_vec(), data)
}

fn is_pointwise(kernel: [usize; 3], geom: &ConvGeom) -> bool {
    kernel == [1, 1, 1] && geom.stride == [1, 1, 1] && geom.pad == [0, 0, 0]
}

fn conv_forward(x: &Array, w: &Array, geom: &ConvGeom) -> (Array, [usize; 3], [usize; 3], [usize; 3]) {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), ws.len(), "input rank {xs:?} vs kernel rank {ws:?}");
    let dims = conv_dims(xs);
    let kernel = conv_dims(ws);
    let (n, c) = (xs[0], xs[1]);
    let o = ws[0];
    assert_eq!(ws[1], c, "kernel expects {} input channels, input has {c}", ws[1]);
    let od = geom.out_extent(dims, kernel);
    let p: usize = od.iter().product();
    let k = c * kernel.iter().product::<usize>();
    let in_sz = c * dims.iter().product::<usize>();
    let mut out = vec![0.0; n * o * p];
    let pointwise = is_pointwise(kernel, geom);
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..n {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let colref: &[f64] = if pointwise {
            xb
        } else {
            kernels::im2col(xb, c, dims, kernel, geom, od, &mut col);
            &col
        };
        kernels::gemm(o, k, p, w.data(), false, colref, false, 0.0, &mut out[b * o * p..(b + 1) * o * p]);
    }
    let mut shape = vec![n, o];
    if xs.len() == 5 {
        shape.push(od[0]);
    }
    shape.extend_from_slice(&od[1..]);
    (Array::new(shape, out), dims, kernel, od)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Array,
    w: &Array,
    g: &Array,
    geom: &ConvGeom,
    dims: [usize; 3],
    kernel: [usize; 3],
    od: [usize; 3],
    need_x: bool,
) -> (Option<Array>, Array) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let p: usize = od.iter().product();
    let k = c * kernel.iter().product::<usize>();
    let in_sz = c * dims.iter().product::<usize>();
    let pointwise = is_pointwise(kernel, geom);
    let mut gw = vec![0.0; o * k];
    let mut gx = if need_x { vec![0.0; n * in_sz] } else { Vec::new() };
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut dcol = if need_x && !pointwise { vec![0.0; k * p] } else { Vec::new() };
    for b in 0..n {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let gb = &g.data()[b * o * p..(b + 1) * o * p];
        let colref: &[f64] = if pointwise {
            xb
        } else {
            kernels::im2col(xb, c, dims, kernel, geom, od, &mut col);
            &col
        };
        kernels::gemm(o, p, k, gb, false, colref, true, 1.0, &mut gw);
        if need_x {
            if pointwise {
                kernels::gemm(k, o, p, w.data(), true, gb, false, 1.0, &mut gx[b * in_sz..(b + 1) * in_sz]);
            } else {
                kernels::gemm(k, o, p, w.data(), true, gb, false, 0.0, &mut dcol);
                kernels::col2im(&dcol, c, dims, kernel, geom, od, &mut gx[b * in_sz..(b + 1) * in_sz]);
            }
        }
    }
    let gx = need_x.then(|| Array::new(x.shape().to_vec(), gx));
    (gx, Array::new(w.shape().to_vec(), gw))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn unary(&self, op: Op, value: Array) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
        let v = zip(&a, &b, f);
        self.tape.push(v, op, self.requires_grad() || other.requires_grad())
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), self.value().map(|v| v * k))
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), self.value().map(|v| v + k))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), self.value().map(f64::exp))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), self.value().map(f64::ln))
    }

    pub fn sqr(&self) -> Var<'t> {
        self.unary(Op::Sqr(self.id), self.value().map(|v| v * v))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), self.value().map(|v| v.max(0.0)))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), self.value().map(kernels::sigmoid))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), self.value().map(kernels::softplus))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), Array::scalar(self.value().sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let v = self.value();
        let (outer, len, inner) = Array::axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.unary(Op::SumAxis { x: self.id, axis }, Array::new(shape, out))
    }

    /// `ln Σ exp` over `axis`, removing it; stable for large magnitudes.
    pub fn logsumexp_axis(&self, axis: usize) -> Var<'t> {
        let v = self.value();
        let (outer, len, inner) = Array::axis_split(v.shape(), axis);
        assert!(len > 0, "logsumexp over empty axis");
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| d[(o * len + l) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|l| (at(l) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.unary(Op::LogSumExpAxis { x: self.id, axis }, Array::new(shape, out))
    }

    /// Repeats size-1 axes to reach `shape` (same rank).
    pub fn broadcast_as(&self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.rank(), shape.len(), "broadcast must preserve rank");
        for (&s, &d) in v.shape().iter().zip(shape) {
            assert!(s == d || s == 1, "cannot broadcast {:?} to {shape:?}", v.shape());
        }
        if v.shape() == shape {
            return *self;
        }
        let mut out = vec![0.0; numel(shape)];
        let src = v.data();
        kernels::for_each_broadcast(v.shape(), shape, |d, s| out[d] = src[s]);
        self.unary(Op::Broadcast(self.id), Array::new(shape.to_vec(), out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape.to_vec());
        self.unary(Op::Reshape(self.id), v)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        let (outer, total, inner) = Array::axis_split(v.shape(), axis);
        assert!(start + len <= total, "narrow out of range");
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.unary(Op::Narrow { x: self.id, axis, start }, Array::new(shape, out))
    }

    /// Joins `xs` along `axis`; all other extents must agree.
    pub fn concat(xs: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!xs.is_empty(), "concat of nothing");
        let tape = xs[0].tape;
        let vals: Vec<Rc<Array>> = xs.iter().map(|x| x.value()).collect();
        let mut shape = vals[0].shape().to_vec();
        let mut total = 0;
        for v in &vals {
            assert_eq!(v.rank(), shape.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in v.shape().iter().zip(&shape).enumerate() {
                assert!(ax == axis || a == b, "concat extent mismatch on axis {ax}");
            }
            total += v.shape()[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = Array::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = xs.iter().any(|x| x.requires_grad());
        tape.push(Array::new(shape, out), Op::Concat { xs: xs.iter().map(|x| x.id).collect(), axis }, rg)
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(b.shape()[0], k, "matmul inner extent mismatch");
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(Array::new(vec![m, n], out), Op::Matmul(self.id, other.id), rg)
    }

    /// Convolution of `[N, C, H, W]` by `[O, C, kh, kw]`, or of
    /// `[N, C, D, H, W]` by `[O, C, kd, kh, kw]`. No bias.
    pub fn conv(&self, weight: &Var<'t>, geom: ConvGeom) -> Var<'t> {
        self.same_tape(weight);
        let (out, dims, kernel, od) = conv_forward(&self.value(), &weight.value(), &geom);
        let rg = self.requires_grad() || weight.requires_grad();
        self.tape
            .push(out, Op::Conv { x: self.id, w: weight.id, geom, dims, kernel, out: od }, rg)
    }

    /// Stride-1 average pooling with "same" zero padding (padding counted in
    /// the average). `kernel` is `(depth, height, width)`, all odd; rank-4
    /// inputs must use a depth of 1.
    pub fn avg_pool_same(&self, kernel: [usize; 3]) -> Var<'t> {
        assert!(kernel.iter().all(|k| k % 2 == 1), "pooling kernel must be odd");
        let v = self.value();
        let dims = conv_dims(v.shape());
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; v.len()];
        kernels::avg_pool_same(v.data(), n * c, dims, kernel, &mut out);
        self.unary(Op::AvgPool { x: self.id, kernel, dims }, Array::new(v.shape().to_vec(), out))
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes.
    pub fn upsample2x(&self) -> Var<'t> {
        let v = self.value();
        let r = v.rank();
        assert!(r >= 2, "upsample needs at least two axes");
        let (h, w) = (v.shape()[r - 2], v.shape()[r - 1]);
        let planes = numel(&v.shape()[..r - 2]);
        let mut out = vec![0.0; planes * 4 * h * w];
        let d = v.data();
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        self.unary(Op::Upsample2x(self.id), Array::new(shape, out))
    }

    /// Batch normalization over axis 1 of an `[N, C, ...]` input, with
    /// per-channel affine `gamma`, `beta` of shape `[C]`. In training mode
    /// the statistics of the batch are returned for running averages.
    pub fn batch_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, mode: BnMode<'_>) -> (Var<'t>, Option<BnStats>) {
        self.same_tape(gamma);
        self.same_tape(beta);
        let v = self.value();
        let shape = v.shape().to_vec();
        assert!(shape.len() >= 2, "batch norm needs [N, C, ...]");
        let (n, c) = (shape[0], shape[1]);
        let s = numel(&shape[2..]);
        let (gv, bv) = (gamma.value(), beta.value());
        assert_eq!(gv.shape(), [c], "gamma shape");
        assert_eq!(bv.shape(), [c], "beta shape");
        let d = v.data();
        let m = (n * s) as f64;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        mean[ch] += d[off..off + s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|x| *x /= m);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        var[ch] += d[off..off + s].iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|x| *x /= m);
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                assert_eq!(mean.len(), c, "running mean length");
                assert_eq!(var.len(), c, "running var length");
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let stats = train.then(|| BnStats { mean, var, count: n * s });
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let var_out = self.tape.push(
            Array::new(shape, out),
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train },
            rg,
        );
        (var_out, stats)
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(&self, &rhs)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(&self, &rhs)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(&self, &rhs)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self::Output {
        self.scale(rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self::Output {
        self.scale(-1.0)
    }
}
