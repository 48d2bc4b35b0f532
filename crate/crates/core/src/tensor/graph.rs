//! Reverse-mode differentiation over a closed set of operations.
//!
//! A [`Graph`] owns every tensor produced during one forward execution. Each
//! op appends a node; nodes whose inputs require gradients remember the op so
//! [`Graph::backward`] can replay it in reverse insertion order, which is a
//! valid topological order because inputs always precede outputs.

use super::ops::{self, Axis};
use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Sigmoid,
    Tanh,
    Silu,
    Relu,
    Relu6,
    Gelu,
    Square,
    /// `(x + eps)^(-1/2)`
    Rsqrt(f64),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, stride: usize, pad: usize },
    Softmax(Var, usize),
    Bilinear { map: Var, points: Var },
    MeanAxis(Var, usize),
    MaxPool { x: Var, k: usize, stride: usize, pad: usize },
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Upsample(Var, usize),
    Sum(Var),
    Select(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape plus value arena for one logical execution.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    recording: bool,
    track_params: bool,
    flops: u64,
    faulty_sigmoid: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records differentiable ops.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), recording: true, track_params: false, flops: 0, faulty_sigmoid: false }
    }

    /// A graph that only evaluates; `backward` finds nothing to differentiate.
    pub fn inference() -> Self {
        Self { recording: false, ..Self::new() }
    }

    /// Make [`Graph::param`] create gradient-tracking leaves.
    pub fn track_params(mut self, on: bool) -> Self {
        self.track_params = on;
        self
    }

    /// Replace the sigmoid backward rule with a wrong one. Used to show that
    /// gradient checking catches a broken rule.
    #[doc(hidden)]
    pub fn with_faulty_sigmoid(mut self) -> Self {
        self.faulty_sigmoid = true;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Multiply-accumulates ×2 over convolutions and matmuls evaluated so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// A leaf that receives a gradient when the graph is recording.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let rg = self.recording;
        self.push_leaf(t, rg)
    }

    /// A model weight: a constant unless parameter tracking is enabled.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let rg = self.recording && self.track_params;
        self.push_leaf(t.clone(), rg)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert!(value.all_finite() || inputs.iter().any(|v| !self.value(*v).all_finite()));
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad: rg, op });
        Var(self.nodes.len() - 1)
    }

    // -- elementwise --------------------------------------------------------

    /// `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, &[a, b], Op::Add(a, b)))
    }

    /// `a − b`, with `b` broadcast onto `a`'s shape.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(y, &[a, b], Op::Sub(a, b)))
    }

    /// `a ⊙ b`, with `b` broadcast onto `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|x| x * c);
        self.push(y, &[a], Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let f: fn(T, f64) -> T = match u {
            Unary::Sigmoid => |x, _| ops::sigmoid(x),
            Unary::Tanh => |x, _| x.tanh(),
            Unary::Silu => |x, _| ops::silu(x),
            Unary::Relu => |x, _| x.max(T::zero()),
            Unary::Relu6 => |x, _| ops::relu6(x),
            Unary::Gelu => |x, _| ops::gelu(x),
            Unary::Square => |x, _| x * x,
            Unary::Rsqrt(_) => |x, eps| (x + T::lit(eps)).sqrt().recip(),
        };
        let eps = if let Unary::Rsqrt(e) = u { e } else { 0.0 };
        let y = self.value(a).map(|x| f(x, eps));
        self.push(y, &[a], Op::Unary(a, u))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn relu6(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu6)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn rsqrt(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, Unary::Rsqrt(eps))
    }

    // -- linear algebra and convolution ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        let s = self.value(a).shape();
        self.flops += 2 * (s[0] * s[1] * y.shape()[1]) as u64;
        Ok(self.push(y, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = ops::transpose2d(self.value(a))?;
        Ok(self.push(y, &[a], Op::Transpose(a)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        let ws = self.value(w).shape();
        self.flops += 2 * (y.len() * ws[1] * ws[2] * ws[3]) as u64;
        Ok(self.push(y, &[x, w], Op::Conv2d { x, w, stride, pad }))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::depthwise_conv2d(self.value(x), self.value(w), stride, pad)?;
        let ws = self.value(w).shape();
        self.flops += 2 * (y.len() * ws[1] * ws[2]) as u64;
        Ok(self.push(y, &[x, w], Op::Depthwise { x, w, stride, pad }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(a), axis)?;
        Ok(self.push(y, &[a], Op::Softmax(a, axis)))
    }

    /// Samples `map [C,H,W]` at normalized `points [N,2]`, giving `[N,C]`.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let y = ops::bilinear_sample_points(self.value(map), self.value(points))?;
        Ok(self.push(y, &[map, points], Op::Bilinear { map, points }))
    }

    // -- reductions and pooling ---------------------------------------------

    /// Mean over `axis`, kept with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = ops::mean_axis(self.value(a), axis)?;
        Ok(self.push(y, &[a], Op::MeanAxis(a, axis)))
    }

    /// `[C,H,W] → [C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("global_avg_pool expects [C,H,W], got {s:?}"));
        }
        let flat = self.reshape(a, &[s[0], s[1] * s[2]])?;
        let m = self.mean_axis(flat, 1)?;
        self.reshape(m, &[s[0], 1, 1])
    }

    pub fn avg_pool_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        if self.shape(a).len() != 3 {
            return Err(dim_err!("avg_pool_axis expects [C,H,W], got {:?}", self.shape(a)));
        }
        self.mean_axis(a, if axis == Axis::H { 1 } else { 2 })
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::max_pool2d(self.value(x), k, stride, pad)?;
        Ok(self.push(y, &[x], Op::MaxPool { x, k, stride, pad }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, &[a], Op::Sum(a))
    }

    /// The element at flat index `i` as a scalar.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.len() {
            return Err(dim_err!("select index {i} out of {} elements", t.len()));
        }
        let y = Tensor::scalar(t.data()[i]);
        Ok(self.push(y, &[a], Op::Select(a, i)))
    }

    // -- layout -------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&ts, axis)?;
        Ok(self.push(y, parts, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = ops::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(y, &[x], Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, &[x], Op::Reshape(x)))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(y, &[x], Op::Upsample(x, factor)))
    }

    // -- backward -----------------------------------------------------------

    /// Accumulates `d loss / d v` into every node that requires a gradient.
    ///
    /// `loss` must hold exactly one element. Gradients from an earlier call are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&mut self, node: usize, op: &Op<T>, g: &Tensor<T>) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                if self.needs(b) {
                    let gb = ops::reduce_to(g, self.shape(b));
                    self.accumulate(b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                if self.needs(b) {
                    let gb = ops::reduce_to(g, self.shape(b)).map(|v| -v);
                    self.accumulate(b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let ga = ops::broadcast_scale(g, self.value(b));
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = ops::broadcast_product_reduce(g, self.value(a), self.shape(b));
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(a, g.map(|v| v * c)),
            Op::Unary(a, u) => {
                let x = self.value(a);
                let y = &self.nodes[node].value;
                let faulty = self.faulty_sigmoid;
                let d = match u {
                    Unary::Sigmoid if faulty => y.zip_map(g, |s, gv| gv * s)?,
                    Unary::Sigmoid => y.zip_map(g, |s, gv| gv * s * (T::one() - s))?,
                    Unary::Tanh => y.zip_map(g, |t, gv| gv * (T::one() - t * t))?,
                    Unary::Silu => x.zip_map(g, |xv, gv| gv * ops::silu_grad(xv))?,
                    Unary::Relu => x.zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?,
                    Unary::Relu6 => {
                        x.zip_map(g, |xv, gv| if xv > T::zero() && xv < T::lit(6.0) { gv } else { T::zero() })?
                    }
                    Unary::Gelu => x.zip_map(g, |xv, gv| gv * ops::gelu_grad(xv))?,
                    Unary::Square => x.zip_map(g, |xv, gv| gv * (xv + xv))?,
                    // d/dx (x+eps)^(-1/2) = -1/2 · y³
                    Unary::Rsqrt(_) => y.zip_map(g, |yv, gv| gv * T::lit(-0.5) * yv * yv * yv)?,
                };
                self.accumulate(a, d);
            }
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    let bt = ops::transpose2d(self.value(b))?;
                    let ga = ops::matmul(g, &bt)?;
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let at = ops::transpose2d(self.value(a))?;
                    let gb = ops::matmul(&at, g)?;
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(a, ops::transpose2d(g)?),
            Op::Conv2d { x, w, stride, pad } => {
                if self.needs(x) {
                    let gx = ops::conv2d_grad_input(g, self.value(w), self.shape(x), stride, pad)?;
                    self.accumulate(x, gx);
                }
                if self.needs(w) {
                    let gw = ops::conv2d_grad_weight(g, self.value(x), self.shape(w), stride, pad)?;
                    self.accumulate(w, gw);
                }
            }
            Op::Depthwise { x, w, stride, pad } => {
                if self.needs(x) {
                    let gx = ops::depthwise_grad_input(g, self.value(w), self.shape(x), stride, pad)?;
                    self.accumulate(x, gx);
                }
                if self.needs(w) {
                    let gw = ops::depthwise_grad_weight(g, self.value(x), self.shape(w), stride, pad)?;
                    self.accumulate(w, gw);
                }
            }
            Op::Softmax(a, axis) => {
                let gx = ops::softmax_backward(&self.nodes[node].value, g, axis)?;
                self.accumulate(a, gx);
            }
            Op::Bilinear { map, points } => {
                let (gm, gp) = ops::bilinear_sample_backward(self.value(map), self.value(points), g)?;
                self.accumulate(map, gm);
                self.accumulate(points, gp);
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.shape(a).to_vec();
                let n = T::lit(shape[axis] as f64);
                let gx = ops::broadcast_binary(&Tensor::zeros(&shape), g, |_, gv| gv / n)?;
                self.accumulate(a, gx);
            }
            Op::MaxPool { x, k, stride, pad } => {
                let gx = ops::max_pool2d_backward(self.value(x), g, k, stride, pad)?;
                self.accumulate(x, gx);
            }
            Op::Concat(ref parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if self.needs(p) {
                        let gp = ops::narrow(g, axis, start, len)?;
                        self.accumulate(p, gp);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let gx = ops::narrow_backward(g, self.shape(x), axis, start);
                self.accumulate(x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(x))?;
                self.accumulate(x, gx);
            }
            Op::Upsample(x, factor) => self.accumulate(x, ops::upsample_nearest_backward(g, factor)),
            Op::Sum(a) => {
                let gv = g.data()[0];
                let gx = Tensor::full(self.shape(a), gv);
                self.accumulate(a, gx);
            }
            Op::Select(a, i) => {
                let mut gx = Tensor::zeros(self.shape(a));
                gx.data_mut()[i] = g.data()[0];
                self.accumulate(a, gx);
            }
        }
        Ok(())
    }
}
