//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node whose parents were recorded earlier, so the
//! insertion order is a topological order and the graph is acyclic by
//! construction. [`Graph::backward`] walks the tape once in reverse.

use std::fmt;

use super::conv::{self, ConvGeometry};
use super::special::{normal_cdf, normal_pdf};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation whose forward value is computed by the caller
/// and whose backward rule is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (same length as that input), or `None`
    /// where the input does not need one.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Differentiable primitives recorded by [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Tanh,
    Exp,
    Ln,
    Square,
    Sum,
    Mean,
    Conv2d,
    ConvTranspose2d,
    LeakyRelu,
    Clamp,
    NormalCdf,
    ChannelSlice,
}

/// Catalog of the built-in differentiable primitives.
pub fn primitive_set() -> &'static [Primitive] {
    use Primitive::*;
    &[
        Add,
        Sub,
        Mul,
        Scale,
        Tanh,
        Exp,
        Ln,
        Square,
        Sum,
        Mean,
        Conv2d,
        ConvTranspose2d,
        LeakyRelu,
        Clamp,
        NormalCdf,
        ChannelSlice,
    ]
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        // Geometry of the adjoint convolution: its input is this op's output.
        geom: ConvGeometry,
    },
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    NormalCdf(Var),
    ChannelSlice {
        input: Var,
        start: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    f(acc);
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to
    /// `v`; `None` for nodes that do not require one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else if va.is_scalar() {
            let s = va.item();
            vb.map(|y| f(s, y))
        } else {
            return Err(Error::Shape(format!("{:?} vs {:?}", va.shape(), vb.shape())));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Standard normal CDF, elementwise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.unary(a, normal_cdf, Op::NormalCdf(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Channels `start..end` of an `(N, C, H, W)` tensor.
    pub fn channel_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if start >= end || end > c {
            return Err(Error::Shape(format!("channel slice {start}..{end} of {c}")));
        }
        let plane = h * w;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            data.extend_from_slice(&src[(b * c + start) * plane..(b * c + end) * plane]);
        }
        let value = Tensor::new(vec![n, end - start, h, w], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ChannelSlice { input: a, start }, rg))
    }

    /// Strided 2-D convolution. `input` is `(N, Cin, H, W)`, `weight` is
    /// `(Cout, Cin, K, K)`, `bias` is `(Cout)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let (co, wci, k, k2) = self.value(weight).dims4()?;
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} for input {:?}",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape("conv2d kernel larger than padded input".into()));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: ci,
            in_h: h,
            in_w: w,
            out_channels: co,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
            kernel: k,
            stride,
            pad,
        };
        let mut out = vec![0.0; geom.out_len()];
        conv::forward(&geom, self.value(input).data(), self.value(weight).data(), &mut out);
        if let Some(b) = bias {
            self.check_bias(b, co)?;
            conv::add_bias(&mut out, self.value(b).data(), n, geom.out_h * geom.out_w);
        }
        let value = Tensor::new(vec![n, co, geom.out_h, geom.out_w], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Strided transposed convolution. `input` is `(N, Cin, H, W)`, `weight` is
    /// `(Cin, Cout, K, K)`; the output extent is `(H-1)*stride - 2*pad + K +
    /// output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, w) = self.value(input).dims4()?;
        let (wci, co, k, k2) = self.value(weight).dims4()?;
        if wci != ci || k != k2 || stride == 0 || output_pad >= stride.max(1) {
            return Err(Error::Shape(format!(
                "conv_transpose2d weight {:?} for input {:?}",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        let full_h = (h - 1) * stride + k + output_pad;
        let full_w = (w - 1) * stride + k + output_pad;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::Shape("conv_transpose2d output would be empty".into()));
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: co,
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            out_channels: ci,
            out_h: h,
            out_w: w,
            kernel: k,
            stride,
            pad,
        };
        let mut out = vec![0.0; geom.in_len()];
        conv::adjoint_input(&geom, self.value(input).data(), self.value(weight).data(), &mut out);
        if let Some(b) = bias {
            self.check_bias(b, co)?;
            conv::add_bias(&mut out, self.value(b).data(), n, geom.in_h * geom.in_w);
        }
        let value = Tensor::new(vec![n, co, geom.in_h, geom.in_w], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::ConvTranspose2d { input, weight, bias, geom }, rg))
    }

    fn check_bias(&self, b: Var, channels: usize) -> Result<()> {
        if self.value(b).len() != channels {
            return Err(Error::Shape(format!(
                "bias of {} for {channels} channels",
                self.value(b).len()
            )));
        }
        Ok(())
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Populates gradients of the scalar `loss` on every node that requires
    /// one. Leaves that the loss does not reach receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                Some(g.unwrap_or_else(|| vec![0.0; node.value.len()]))
            } else {
                None
            };
        }
        Ok(())
    }

    fn send_broadcast(&self, target: Var, g: &[f64], scale: impl Fn(usize) -> f64, grads: &mut [Option<Vec<f64>>]) {
        if !self.requires_grad(target) {
            return;
        }
        let len = self.value(target).len();
        if len == g.len() {
            accumulate_with(&mut grads[target.0], len, |acc| {
                acc.iter_mut().enumerate().for_each(|(j, a)| *a += g[j] * scale(j))
            });
        } else {
            // scalar operand broadcast against a tensor
            let total: f64 = g.iter().enumerate().map(|(j, &gj)| gj * scale(j)).sum();
            accumulate_with(&mut grads[target.0], 1, |acc| acc[0] += total);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let at = |v: Var, j: usize| {
            let d = self.value(v).data();
            if d.len() == 1 { d[0] } else { d[j] }
        };
        let local = |v: Var, grads: &mut [Option<Vec<f64>>], f: &dyn Fn(usize) -> f64| {
            if self.requires_grad(v) {
                let gv: Vec<f64> = g.iter().enumerate().map(|(j, &gj)| gj * f(j)).collect();
                accumulate(&mut grads[v.0], &gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.send_broadcast(a, g, |_| 1.0, grads);
                self.send_broadcast(b, g, |_| 1.0, grads);
            }
            &Op::Sub(a, b) => {
                self.send_broadcast(a, g, |_| 1.0, grads);
                self.send_broadcast(b, g, |_| -1.0, grads);
            }
            &Op::Mul(a, b) => {
                self.send_broadcast(a, g, |j| at(b, j), grads);
                self.send_broadcast(b, g, |j| at(a, j), grads);
            }
            &Op::Scale(a, c) => local(a, grads, &|_| c),
            &Op::Tanh(a) => local(a, grads, &|j| 1.0 - y[j] * y[j]),
            &Op::Exp(a) => local(a, grads, &|j| y[j]),
            &Op::Ln(a) => {
                let x = self.value(a).data();
                local(a, grads, &|j| 1.0 / x[j])
            }
            &Op::Square(a) => {
                let x = self.value(a).data();
                local(a, grads, &|j| 2.0 * x[j])
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                local_fill(self, a, g[0], n, grads)
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                local_fill(self, a, g[0] / n as f64, n, grads)
            }
            &Op::LeakyRelu(a, slope) => {
                let x = self.value(a).data();
                local(a, grads, &|j| if x[j] > 0.0 { 1.0 } else { slope })
            }
            &Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                local(a, grads, &|j| if x[j] >= lo && x[j] <= hi { 1.0 } else { 0.0 })
            }
            &Op::NormalCdf(a) => {
                let x = self.value(a).data();
                local(a, grads, &|j| normal_pdf(x[j]))
            }
            &Op::ChannelSlice { input, start } => {
                if self.requires_grad(input) {
                    let src = self.value(input);
                    let (n, c, h, w) = src.dims4().expect("checked at construction");
                    let width = node.value.shape()[1];
                    let plane = h * w;
                    accumulate_with(&mut grads[input.0], src.len(), |acc| {
                        for b in 0..n {
                            let dst = (b * c + start) * plane;
                            let from = b * width * plane;
                            acc[dst..dst + width * plane]
                                .iter_mut()
                                .zip(&g[from..from + width * plane])
                                .for_each(|(a, v)| *a += v);
                        }
                    });
                }
            }
            &Op::Conv2d { input, weight, bias, geom } => {
                if self.requires_grad(input) {
                    accumulate_with(&mut grads[input.0], geom.in_len(), |acc| {
                        conv::adjoint_input(&geom, g, self.value(weight).data(), acc)
                    });
                }
                if self.requires_grad(weight) {
                    accumulate_with(&mut grads[weight.0], geom.weight_len(), |acc| {
                        conv::weight_grad(&geom, self.value(input).data(), g, acc)
                    });
                }
                if let Some(b) = bias.filter(|&b| self.requires_grad(b)) {
                    accumulate_with(&mut grads[b.0], geom.out_channels, |acc| {
                        conv::bias_grad(g, acc, geom.batch, geom.out_h * geom.out_w)
                    });
                }
            }
            &Op::ConvTranspose2d { input, weight, bias, geom } => {
                if self.requires_grad(input) {
                    accumulate_with(&mut grads[input.0], geom.out_len(), |acc| {
                        conv::forward(&geom, g, self.value(weight).data(), acc)
                    });
                }
                if self.requires_grad(weight) {
                    accumulate_with(&mut grads[weight.0], geom.weight_len(), |acc| {
                        conv::weight_grad(&geom, g, self.value(input).data(), acc)
                    });
                }
                if let Some(b) = bias.filter(|&b| self.requires_grad(b)) {
                    accumulate_with(&mut grads[b.0], geom.in_channels, |acc| {
                        conv::bias_grad(g, acc, geom.batch, geom.in_h * geom.in_w)
                    });
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let local_grads = op.backward(&values, &node.value, g);
                debug_assert_eq!(local_grads.len(), inputs.len(), "{}", op.name());
                for (&v, lg) in inputs.iter().zip(local_grads) {
                    if let Some(lg) = lg.filter(|_| self.requires_grad(v)) {
                        debug_assert_eq!(lg.len(), self.value(v).len(), "{}", op.name());
                        accumulate(&mut grads[v.0], &lg);
                    }
                }
            }
        }
    }
}

fn local_fill(graph: &Graph, a: Var, value: f64, n: usize, grads: &mut [Option<Vec<f64>>]) {
    if graph.requires_grad(a) {
        accumulate_with(&mut grads[a.0], n, |acc| acc.iter_mut().for_each(|v| *v += value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        assert_eq!(g.value(y).item(), 9.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_products() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3.0, -1.0]));
        let xx = g.mul(x, x).unwrap();
        let l = g.sum(xx);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn conv_constant_image() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 5, 5], 5.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(out.data()[r * 5 + c], 45.0);
            }
        }
        assert_eq!(out.data()[0], 20.0);
    }

    #[test]
    fn transposed_conv_doubles_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[3, 5, 5, 5], 0.1));
        let y = g.conv_transpose2d(x, w, None, 2, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn unreached_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.param(Tensor::from_vec(vec![4.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn scalar_broadcast_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, s).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(g.add(a, b).is_err());
    }
}
