use std::fmt;

use super::conv::{self, ConvGeom};
use super::Tensor4;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward pass is computed outside
/// the graph (warping, correlation, box filtering).
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Adjoint contribution for each parent, in the order the parents were
    /// registered. `None` means the parent receives no gradient.
    fn backward(&self, parents: &[&Tensor4], output: &Tensor4, grad: &Tensor4)
        -> Vec<Option<Tensor4>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Neg(usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Broadcast(usize),
    Reduce { src: usize, scale: f64 },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    SoftmaxChannels(usize),
    Concat(Vec<usize>),
    Crop { src: usize, origin: [usize; 4] },
    Custom(Box<dyn CustomOp>, Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            AddScalar(a) | MulScalar(a, _) | Neg(a) | Abs(a) | Exp(a) | Log(a) | Sqrt(a)
            | Square(a) | Relu(a) | LeakyRelu(a, _) | Sigmoid(a) | Clamp(a, _, _)
            | Broadcast(a) | SoftmaxChannels(a) => vec![*a],
            Reduce { src, .. } | Crop { src, .. } => vec![*src],
            Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Concat(xs) => xs.clone(),
            Custom(_, ps) => ps.clone(),
        }
    }
}

struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation
/// order, so node indices are already a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` does not reach
    /// the root.
    pub fn get_or_zeros(&self, v: Var, like: [usize; 4]) -> Tensor4 {
        self.get(v).cloned().unwrap_or_else(|| Tensor4::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Sums `t` down to `shape`, where every axis of `shape` is either equal to
/// the corresponding axis of `t` or 1.
fn reduce_to(t: &Tensor4, shape: [usize; 4]) -> Tensor4 {
    if t.shape() == shape {
        return t.clone();
    }
    let mut out = Tensor4::zeros(shape);
    let [n, c, h, w] = t.shape();
    let src = t.data();
    let mut i = 0;
    for ni in 0..n {
        let on = if shape[0] == 1 { 0 } else { ni };
        for ci in 0..c {
            let oc = if shape[1] == 1 { 0 } else { ci };
            for yi in 0..h {
                let oy = if shape[2] == 1 { 0 } else { yi };
                let base = ((on * shape[1] + oc) * shape[2] + oy) * shape[3];
                let dst = out.data_mut();
                if shape[3] == 1 {
                    dst[base] += src[i..i + w].iter().sum::<f64>();
                } else {
                    for (d, s) in dst[base..base + w].iter_mut().zip(&src[i..i + w]) {
                        *d += s;
                    }
                }
                i += w;
            }
        }
    }
    out
}

fn broadcast(t: &Tensor4, shape: [usize; 4]) -> Tensor4 {
    if t.shape() == shape {
        return t.clone();
    }
    let ts = t.shape();
    let [n, c, h, w] = shape;
    let mut data = Vec::with_capacity(n * c * h * w);
    let src = t.data();
    for ni in 0..n {
        let sn = if ts[0] == 1 { 0 } else { ni };
        for ci in 0..c {
            let sc = if ts[1] == 1 { 0 } else { ci };
            for yi in 0..h {
                let sy = if ts[2] == 1 { 0 } else { yi };
                let base = ((sn * ts[1] + sc) * ts[2] + sy) * ts[3];
                if ts[3] == 1 {
                    data.extend(std::iter::repeat_n(src[base], w));
                } else {
                    data.extend_from_slice(&src[base..base + w]);
                }
            }
        }
    }
    Tensor4::from_vec(shape, data).expect("broadcast shape")
}

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the open-interval contract even where the logistic saturates
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor4) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Single value of a `1×1×1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("div", self.value(a), self.value(b))?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a.0, b.0)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn sub_scalar(&mut self, a: Var, s: f64) -> Var {
        self.add_scalar(a, -s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::MulScalar(a.0, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(Error::DivisionByZero { op: "div_scalar" });
        }
        Ok(self.mul_scalar(a, 1.0 / s))
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a.0)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let v = self.value(a).map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a.0)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    // ---- shape -------------------------------------------------------

    /// Repeats singleton axes of `a` up to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: [usize; 4]) -> Result<Var> {
        let src = self.shape(a);
        if src.iter().zip(&shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                left: src,
                right: shape,
            });
        }
        if src == shape {
            return Ok(a);
        }
        let v = broadcast(self.value(a), shape);
        Ok(self.push(v, Op::Broadcast(a.0)))
    }

    /// Broadcasts `b` to `a`'s shape, then multiplies.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        let b = self.broadcast_to(b, shape)?;
        self.mul(a, b)
    }

    pub fn div_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        let b = self.broadcast_to(b, shape)?;
        self.div(a, b)
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(a);
        let mut out = shape;
        for &ax in axes {
            if ax >= 4 {
                return Err(Error::invalid(format!("reduction axis {ax} out of range")));
            }
            out[ax] = 1;
        }
        let extent: usize = axes.iter().map(|&ax| shape[ax]).product::<usize>();
        let count: usize = shape.iter().product::<usize>() / out.iter().product::<usize>().max(1);
        if extent == 0 || count == 0 {
            return Err(Error::Empty(format!("reduction over empty extent of {shape:?}")));
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut v = reduce_to(self.value(a), out);
        if mean {
            v.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        Ok(self.push(v, Op::Reduce { src: a.0, scale }))
    }

    /// Sum over `axes`; reduced axes are kept with extent 1.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, &[0, 1, 2, 3], false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, &[0, 1, 2, 3], true)
    }

    /// Stacks channels in argument order. All inputs must share `(n, h, w)`.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Empty("concat_channels of zero tensors".into()))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let [n, _, h, w] = self.shape(first);
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.shape(first),
                    right: s,
                });
            }
            total += s[1];
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for ni in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[ni * c * hw..(ni + 1) * c * hw]);
            }
        }
        let v = Tensor4::from_vec([n, total, h, w], data)?;
        Ok(self.push(v, Op::Concat(xs.iter().map(|x| x.0).collect())))
    }

    /// Sub-block of `a` starting at `origin` with extent `shape`.
    pub fn crop(&mut self, a: Var, origin: [usize; 4], shape: [usize; 4]) -> Result<Var> {
        let src = self.shape(a);
        for ax in 0..4 {
            if origin[ax] + shape[ax] > src[ax] {
                return Err(Error::ShapeMismatch {
                    op: "crop",
                    left: src,
                    right: shape,
                });
            }
        }
        let t = self.value(a);
        let v = Tensor4::from_fn(shape, |[n, c, y, x]| {
            t.at([n + origin[0], c + origin[1], y + origin[2], x + origin[3]])
        });
        Ok(self.push(v, Op::Crop { src: a.0, origin }))
    }

    // ---- layers ------------------------------------------------------

    /// Zero-padded 2-D convolution. `weight` is `(c_out, c_in, k, k)` with odd
    /// `k`; `bias` is `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let is = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if ws[1] != is[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels)",
                left: is,
                right: ws,
            });
        }
        if ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::invalid(format!("conv2d kernel must be square and odd, got {ws:?}")));
        }
        if bs != [1, ws[0], 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias)",
                left: [1, ws[0], 1, 1],
                right: bs,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let geom = ConvGeom { stride, pad, k: ws[2] };
        if is[2] + 2 * pad < geom.k || is[3] + 2 * pad < geom.k {
            return Err(Error::invalid(format!("conv2d kernel {} larger than padded input {is:?}", geom.k)));
        }
        let v = conv::forward(self.value(input), self.value(weight), self.value(bias).data(), geom);
        Ok(self.push(
            v,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                geom,
            },
        ))
    }

    /// Softmax along the channel axis at every `(n, y, x)`.
    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let mut out = Tensor4::zeros(t.shape());
        let src = t.data();
        let dst = out.data_mut();
        for ni in 0..n {
            let base = ni * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(src[base + ci * hw + p]);
                }
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (src[base + ci * hw + p] - m).exp();
                    dst[base + ci * hw + p] = e;
                    z += e;
                }
                for ci in 0..c {
                    dst[base + ci * hw + p] /= z;
                }
            }
        }
        self.push(out, Op::SoftmaxChannels(a.0))
    }

    /// Registers a node whose forward value was computed by the caller.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, parents: &[Var], value: Tensor4) -> Var {
        self.push(value, Op::Custom(op, parents.iter().map(|p| p.0).collect()))
    }

    // ---- reverse pass ------------------------------------------------

    /// Accumulates adjoints of the scalar `root` into every node that
    /// requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rs = self.shape(root);
        if rs != [1, 1, 1, 1] {
            return Err(Error::invalid(format!("backward root must be 1x1x1x1, got {rs:?}")));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor4::ones(rs));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // only differentiable nodes report gradients
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4>], p: usize, t: Tensor4) {
        if !self.nodes[p].requires_grad {
            return;
        }
        match &mut grads[p] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y));
                self.accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                self.accumulate(grads, *a, g.zip_map(bv, |g, y| g / y));
                // d(a/b)/db = -out/b
                let t = g.zip_map(&node.value, |g, o| g * o).zip_map(bv, |t, y| -t / y);
                self.accumulate(grads, *b, t);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Abs(a) => {
                let t = g.zip_map(val(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |g, o| g * o)),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |g, x| g / x)),
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(&node.value, |g, o| 0.5 * g / o)),
            Op::Square(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
            Op::Relu(a) => {
                self.accumulate(grads, *a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))
            }
            Op::LeakyRelu(a, s) => {
                self.accumulate(grads, *a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { s * g }))
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(&node.value, |g, s| g * s * (1.0 - s)))
            }
            Op::Clamp(a, lo, hi) => {
                let t = g.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                self.accumulate(grads, *a, t);
            }
            Op::Broadcast(a) => self.accumulate(grads, *a, reduce_to(g, val(*a).shape())),
            Op::Reduce { src, scale } => {
                let mut t = broadcast(g, val(*src).shape());
                if *scale != 1.0 {
                    t.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
                self.accumulate(grads, *src, t);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = conv::backward(val(*input), val(*weight), g, *geom);
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *weight, gw);
                let c = gb.len();
                self.accumulate(grads, *bias, Tensor4::from_vec([1, c, 1, 1], gb).expect("bias shape"));
            }
            Op::SoftmaxChannels(a) => {
                let y = &node.value;
                let [n, c, h, w] = y.shape();
                let hw = h * w;
                let mut t = Tensor4::zeros(y.shape());
                let (yd, gd) = (y.data(), g.data());
                let td = t.data_mut();
                for ni in 0..n {
                    let base = ni * c * hw;
                    for p in 0..hw {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            let o = base + ci * hw + p;
                            dot += gd[o] * yd[o];
                        }
                        for ci in 0..c {
                            let o = base + ci * hw + p;
                            td[o] = yd[o] * (gd[o] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::Concat(xs) => {
                let mut c0 = 0;
                for &x in xs {
                    let c = val(x).shape()[1];
                    self.accumulate(grads, x, g.channels(c0, c0 + c));
                    c0 += c;
                }
            }
            Op::Crop { src, origin } => {
                let mut t = Tensor4::zeros(val(*src).shape());
                let [n, c, h, w] = g.shape();
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                t.set(
                                    [ni + origin[0], ci + origin[1], y + origin[2], x + origin[3]],
                                    g.at([ni, ci, y, x]),
                                );
                            }
                        }
                    }
                }
                self.accumulate(grads, *src, t);
            }
            Op::Custom(op, ps) => {
                let parents: Vec<&Tensor4> = ps.iter().map(|&p| val(p)).collect();
                let outs = op.backward(&parents, &node.value, g);
                debug_assert_eq!(outs.len(), ps.len(), "{} returned wrong arity", op.name());
                for (&p, t) in ps.iter().zip(outs) {
                    if let Some(t) = t {
                        debug_assert_eq!(t.shape(), val(p).shape(), "{} gradient shape", op.name());
                        self.accumulate(grads, p, t);
                    }
                }
            }
        }
    }
}
