//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied to its nodes in insertion
//! order. Since a node can only reference nodes that already exist, insertion
//! order is a topological order and [`Graph::backward`] is a single reverse
//! sweep. Nodes are never mutated after they are recorded.
//!
//! ```
//! use maskform::graph::Graph;
//! use maskform::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};
use kernels::{col2im_add, gemm, im2col, sigmoid, ConvGeom};

/// Epsilon added to the variance in [`Primitive::LayerNorm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every operation the engine can record.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// `[m, k] · [k, n]`.
    MatMul,
    /// 3×3 kernel, padding 1. Input `[C, H, W]` or `[B, C, H, W]`, weight `[O, C, 3, 3]`.
    Conv3x3 { stride: usize },
    /// 1×1 kernel, stride 1. Weight `[O, C, 1, 1]`.
    Conv1x1,
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Log,
    /// Mean of all entries; output shape `[1]`.
    Mean,
    /// Sum of all entries; output shape `[1]`.
    Sum,
    /// Nearest-neighbour 2× upsampling of the last two axes.
    Upsample2x,
    /// 2×2 average pooling of the last two axes.
    AvgPool2x,
    /// Zero-mean unit-variance normalization along `axis`, without affine terms.
    LayerNorm { axis: usize },
    Scale(f64),
    AddScalar(f64),
    Concat { axis: usize },
    /// Transpose of a rank-2 tensor.
    Transpose,
    /// `x + bias` where `bias` has length `shape[axis]`.
    BiasAdd { axis: usize },
    /// `x * gain` where `gain` has length `shape[axis]`.
    BiasMul { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    /// Picks entries by flat index into a rank-1 tensor.
    Gather(Vec<usize>),
    /// Gradient passes only strictly inside `(lo, hi)`.
    Clamp { lo: f64, hi: f64 },
    Powf(f64),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Conv3x3 { .. } => "conv2d_3x3",
            Primitive::Conv1x1 => "conv2d_1x1",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax { .. } => "log_softmax",
            Primitive::Log => "log",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Upsample2x => "upsample_nearest_2x",
            Primitive::AvgPool2x => "avg_pool_2x",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Scale(_) => "scale_by_constant",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Concat { .. } => "concat",
            Primitive::Transpose => "transpose",
            Primitive::BiasAdd { .. } => "broadcast_add_bias",
            Primitive::BiasMul { .. } => "broadcast_mul_gain",
            Primitive::Narrow { .. } => "narrow",
            Primitive::Reshape(_) => "reshape",
            Primitive::Gather(_) => "gather",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Powf(_) => "powf",
        }
    }
}

#[derive(Debug)]
enum Saved {
    None,
    /// Inverse standard deviations, one per normalized lane.
    InvStd(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<Var>,
    saved: Saved,
    requires_grad: bool,
}

/// Append-only record of tensor computations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], addressable by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn conv_geometry(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    kernel: usize,
    stride: usize,
) -> Result<(usize, ConvGeom, usize)> {
    let (batch, c, h, wd) = match *x {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::shape(op, format!("input must be rank 3 or 4, got {x:?}"))),
    };
    if w.len() != 4 || w[1] != c || w[2] != kernel || w[3] != kernel {
        return Err(Error::shape(
            op,
            format!("weight {w:?} incompatible with input {x:?} and kernel {kernel}"),
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::shape(op, format!("unsupported stride {stride}")));
    }
    let pad = kernel / 2;
    Ok((batch, ConvGeom { channels: c, height: h, width: wd, kernel, stride, pad }, w[0]))
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

    /// Records a leaf. Gradients are produced for it only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Primitive, inputs: Vec<Var>, value: Tensor, saved: Saved) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: Some(op), inputs, saved, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Applies `op` to `inputs` and records the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity_ok = match op {
            Primitive::Concat { .. } => !inputs.is_empty(),
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::Conv3x3 { .. }
            | Primitive::Conv1x1
            | Primitive::BiasAdd { .. }
            | Primitive::BiasMul { .. } => inputs.len() == 2,
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::shape(op.name(), format!("wrong number of inputs: {}", inputs.len())));
        }
        let (value, saved) = self.forward(&op, inputs)?;
        Ok(self.push(op, inputs.to_vec(), value, saved))
    }

    fn forward(&self, op: &Primitive, inputs: &[Var]) -> Result<(Tensor, Saved)> {
        let name = op.name();
        let x = self.value(inputs[0]);
        let plain = |t: Tensor| Ok((t, Saved::None));
        match op {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let y = self.value(inputs[1]);
                same_shape(name, x, y)?;
                let f: fn(f64, f64) -> f64 = match op {
                    Primitive::Add => |a, b| a + b,
                    Primitive::Sub => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
                plain(Tensor::new(x.shape(), data)?)
            }
            Primitive::MatMul => {
                let y = self.value(inputs[1]);
                let (a, b) = (x.shape(), y.shape());
                if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                    return Err(Error::shape(name, format!("{a:?} · {b:?}")));
                }
                let (m, k, n) = (a[0], a[1], b[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, x.data(), (k, 1), y.data(), (n, 1), 0.0, &mut out);
                plain(Tensor::new(vec![m, n], out)?)
            }
            Primitive::Conv3x3 { stride } => self.conv_forward(name, inputs, 3, *stride),
            Primitive::Conv1x1 => self.conv_forward(name, inputs, 1, 1),
            Primitive::Relu => plain(x.map(|v| v.max(0.0))),
            Primitive::Sigmoid => plain(x.map(sigmoid)),
            Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
                check_axis(name, x.shape(), *axis)?;
                let log = matches!(op, Primitive::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let src = x.data();
                let mut out = vec![0.0; src.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + i;
                        let max = (0..n).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = (0..n).map(|t| (src[idx(t)] - max).exp()).sum();
                        let lse = max + total.ln();
                        for t in 0..n {
                            out[idx(t)] = if log {
                                src[idx(t)] - lse
                            } else {
                                (src[idx(t)] - max).exp() / total
                            };
                        }
                    }
                }
                plain(Tensor::new(x.shape(), out)?)
            }
            Primitive::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::domain(name, format!("log of non-positive value {bad}")));
                }
                plain(x.map(f64::ln))
            }
            Primitive::Mean => plain(Tensor::scalar(x.sum() / x.numel() as f64)),
            Primitive::Sum => plain(Tensor::scalar(x.sum())),
            Primitive::Upsample2x => {
                let (planes, h, w) = spatial(name, x.shape())?;
                let src = x.data();
                let mut out = vec![0.0; src.len() * 4];
                for p in 0..planes {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            out[(p * 2 * h + yy) * 2 * w + xx] = src[(p * h + yy / 2) * w + xx / 2];
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] *= 2;
                shape[r - 1] *= 2;
                plain(Tensor::new(shape, out)?)
            }
            Primitive::AvgPool2x => {
                let (planes, h, w) = spatial(name, x.shape())?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(name, format!("odd spatial dims {h}×{w}")));
                }
                let (ho, wo) = (h / 2, w / 2);
                let src = x.data();
                let mut out = vec![0.0; planes * ho * wo];
                for p in 0..planes {
                    for yy in 0..h {
                        for xx in 0..w {
                            out[(p * ho + yy / 2) * wo + xx / 2] += 0.25 * src[(p * h + yy) * w + xx];
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] = ho;
                shape[r - 1] = wo;
                plain(Tensor::new(shape, out)?)
            }
            Primitive::LayerNorm { axis } => {
                check_axis(name, x.shape(), *axis)?;
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let src = x.data();
                let mut out = vec![0.0; src.len()];
                let mut inv_std = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + i;
                        let mean = (0..n).map(|t| src[idx(t)]).sum::<f64>() / n as f64;
                        let var =
                            (0..n).map(|t| (src[idx(t)] - mean).powi(2)).sum::<f64>() / n as f64;
                        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for t in 0..n {
                            out[idx(t)] = (src[idx(t)] - mean) * r;
                        }
                        inv_std.push(r);
                    }
                }
                Ok((Tensor::new(x.shape(), out)?, Saved::InvStd(inv_std)))
            }
            Primitive::Scale(c) => plain(x.map(|v| v * c)),
            Primitive::AddScalar(c) => plain(x.map(|v| v + c)),
            Primitive::Concat { axis } => {
                check_axis(name, x.shape(), *axis)?;
                let mut shape = x.shape().to_vec();
                shape[*axis] = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let compatible = s.len() == shape.len()
                        && s.iter().zip(x.shape()).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                    if !compatible {
                        return Err(Error::shape(name, format!("{:?} vs {s:?}", x.shape())));
                    }
                    shape[*axis] += s[*axis];
                }
                let (outer, total, inner) = split_axis(&shape, *axis);
                let mut out = vec![0.0; outer * total * inner];
                let mut offset = 0;
                for &v in inputs {
                    let (_, n, _) = split_axis(self.shape(v), *axis);
                    let src = self.value(v).data();
                    for o in 0..outer {
                        let dst = (o * total + offset) * inner;
                        out[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
                    }
                    offset += n;
                }
                plain(Tensor::new(shape, out)?)
            }
            Primitive::Transpose => {
                let s = x.shape();
                if s.len() != 2 {
                    return Err(Error::shape(name, format!("rank-2 input required, got {s:?}")));
                }
                let (r, c) = (s[0], s[1]);
                let src = x.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = src[i * c + j];
                    }
                }
                plain(Tensor::new(vec![c, r], out)?)
            }
            Primitive::BiasAdd { axis } | Primitive::BiasMul { axis } => {
                check_axis(name, x.shape(), *axis)?;
                let b = self.value(inputs[1]);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                if b.numel() != n || b.rank() != 1 {
                    return Err(Error::shape(
                        name,
                        format!("bias {:?} does not match axis {axis} of {:?}", b.shape(), x.shape()),
                    ));
                }
                let add = matches!(op, Primitive::BiasAdd { .. });
                let (src, bias) = (x.data(), b.data());
                let mut out = vec![0.0; src.len()];
                for o in 0..outer {
                    for t in 0..n {
                        let base = (o * n + t) * inner;
                        for i in base..base + inner {
                            out[i] = if add { src[i] + bias[t] } else { src[i] * bias[t] };
                        }
                    }
                }
                plain(Tensor::new(x.shape(), out)?)
            }
            Primitive::Narrow { axis, start, len } => {
                check_axis(name, x.shape(), *axis)?;
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                if *len == 0 || start + len > n {
                    return Err(Error::shape(
                        name,
                        format!("range {start}..{} outside axis of length {n}", start + len),
                    ));
                }
                let src = x.data();
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    out.extend_from_slice(&src[from..from + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = *len;
                plain(Tensor::new(shape, out)?)
            }
            Primitive::Reshape(shape) => plain(x.clone().reshape(shape.clone())?),
            Primitive::Gather(indices) => {
                if indices.is_empty() {
                    return Err(Error::shape(name, "empty index list"));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
                    return Err(Error::shape(name, format!("index {bad} out of {}", x.numel())));
                }
                let src = x.data();
                plain(Tensor::new(vec![indices.len()], indices.iter().map(|&i| src[i]).collect())?)
            }
            Primitive::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::domain(name, format!("empty interval [{lo}, {hi}]")));
                }
                plain(x.map(|v| v.clamp(*lo, *hi)))
            }
            Primitive::Powf(p) => {
                let ok = |v: f64| v > 0.0 || (v == 0.0 && *p >= 1.0);
                if let Some(bad) = x.data().iter().find(|&&v| !ok(v)) {
                    return Err(Error::domain(name, format!("{bad}^{p} outside domain")));
                }
                plain(x.map(|v| v.powf(*p)))
            }
        }
    }

    fn conv_forward(
        &self,
        name: &'static str,
        inputs: &[Var],
        kernel: usize,
        stride: usize,
    ) -> Result<(Tensor, Saved)> {
        let (x, w) = (self.value(inputs[0]), self.value(inputs[1]));
        let (batch, g, out_ch) = conv_geometry(name, x.shape(), w.shape(), kernel, stride)?;
        let in_len = g.channels * g.height * g.width;
        let positions = g.positions();
        let mut out = vec![0.0; batch * out_ch * positions];
        for b in 0..batch {
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let dst = &mut out[b * out_ch * positions..(b + 1) * out_ch * positions];
            if g.is_pointwise() {
                gemm(out_ch, g.patch_len(), positions, w.data(), (g.patch_len(), 1), image, (positions, 1), 0.0, dst);
            } else {
                let cols = im2col(image, &g);
                gemm(out_ch, g.patch_len(), positions, w.data(), (g.patch_len(), 1), &cols, (positions, 1), 0.0, dst);
            }
        }
        let shape = if x.rank() == 3 {
            vec![out_ch, g.out_height(), g.out_width()]
        } else {
            vec![batch, out_ch, g.out_height(), g.out_width()]
        };
        Ok((Tensor::new(shape, out)?, Saved::None))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every leaf recorded with `requires_grad` that the loss depends on gets
    /// `∂loss/∂leaf`; contributions from multiple uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Internal(format!("unknown node {}", loss.0)))?;
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(dy) = grads[id].take() else { continue };
            if let Some(bad) = node.inputs.iter().find(|v| v.0 >= id) {
                return Err(Error::Internal(format!("node {id} reads later node {}", bad.0)));
            }
            self.backprop(op, node, &dy, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(data) if node.op.is_none() && node.requires_grad => {
                        Some(Tensor::new(node.value.shape(), data).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(
        &self,
        op: &Primitive,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let inputs = &node.inputs;
        let y = node.value.data();
        let x = self.value(inputs[0]);
        let xd = x.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.numel();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            }
        };
        match op {
            Primitive::Add | Primitive::Sub => {
                let sign = if matches!(op, Primitive::Sub) { -1.0 } else { 1.0 };
                acc(inputs[0], &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(inputs[1], &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d));
            }
            Primitive::Mul => {
                let other = self.value(inputs[1]).data();
                acc(inputs[0], &mut |g| {
                    for ((g, d), b) in g.iter_mut().zip(dy).zip(other) {
                        *g += d * b;
                    }
                });
                acc(inputs[1], &mut |g| {
                    for ((g, d), a) in g.iter_mut().zip(dy).zip(xd) {
                        *g += d * a;
                    }
                });
            }
            Primitive::MatMul => {
                let b = self.value(inputs[1]);
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(inputs[0], &mut |g| gemm(m, n, k, dy, (n, 1), b.data(), (1, n), 1.0, g));
                acc(inputs[1], &mut |g| gemm(k, m, n, xd, (1, k), dy, (n, 1), 1.0, g));
            }
            Primitive::Conv3x3 { stride } => self.conv_backward(inputs, 3, *stride, dy, grads)?,
            Primitive::Conv1x1 => self.conv_backward(inputs, 1, 1, dy, grads)?,
            Primitive::Relu => acc(inputs[0], &mut |g| {
                for ((g, d), a) in g.iter_mut().zip(dy).zip(xd) {
                    if *a > 0.0 {
                        *g += d;
                    }
                }
            }),
            Primitive::Sigmoid => acc(inputs[0], &mut |g| {
                for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * s * (1.0 - s);
                }
            }),
            Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
                let log = matches!(op, Primitive::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                acc(inputs[0], &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |t: usize| (o * n + t) * inner + i;
                            if log {
                                let total: f64 = (0..n).map(|t| dy[idx(t)]).sum();
                                for t in 0..n {
                                    g[idx(t)] += dy[idx(t)] - y[idx(t)].exp() * total;
                                }
                            } else {
                                let dot: f64 = (0..n).map(|t| dy[idx(t)] * y[idx(t)]).sum();
                                for t in 0..n {
                                    g[idx(t)] += y[idx(t)] * (dy[idx(t)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Primitive::Log => acc(inputs[0], &mut |g| {
                for ((g, d), a) in g.iter_mut().zip(dy).zip(xd) {
                    *g += d / a;
                }
            }),
            Primitive::Mean => {
                let share = dy[0] / xd.len() as f64;
                acc(inputs[0], &mut |g| g.iter_mut().for_each(|g| *g += share));
            }
            Primitive::Sum => acc(inputs[0], &mut |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Primitive::Upsample2x => {
                let (planes, h, w) = spatial("upsample_nearest_2x", x.shape())?;
                acc(inputs[0], &mut |g| {
                    for p in 0..planes {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                g[(p * h + yy / 2) * w + xx / 2] += dy[(p * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Primitive::AvgPool2x => {
                let (planes, h, w) = spatial("avg_pool_2x", x.shape())?;
                let (ho, wo) = (h / 2, w / 2);
                acc(inputs[0], &mut |g| {
                    for p in 0..planes {
                        for yy in 0..h {
                            for xx in 0..w {
                                g[(p * h + yy) * w + xx] += 0.25 * dy[(p * ho + yy / 2) * wo + xx / 2];
                            }
                        }
                    }
                });
            }
            Primitive::LayerNorm { axis } => {
                let Saved::InvStd(inv_std) = &node.saved else {
                    return Err(Error::Internal("layer_norm lost its saved statistics".into()));
                };
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                acc(inputs[0], &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |t: usize| (o * n + t) * inner + i;
                            let r = inv_std[o * inner + i];
                            let mean_dy = (0..n).map(|t| dy[idx(t)]).sum::<f64>() / n as f64;
                            let mean_dyy = (0..n).map(|t| dy[idx(t)] * y[idx(t)]).sum::<f64>() / n as f64;
                            for t in 0..n {
                                g[idx(t)] += r * (dy[idx(t)] - mean_dy - y[idx(t)] * mean_dyy);
                            }
                        }
                    }
                });
            }
            Primitive::Scale(c) => acc(inputs[0], &mut |g| {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)
            }),
            Primitive::AddScalar(_) | Primitive::Reshape(_) => {
                acc(inputs[0], &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d))
            }
            Primitive::Concat { axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let (_, n, _) = split_axis(self.shape(v), *axis);
                    acc(v, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (g, d) in g[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(&dy[src..src + n * inner])
                            {
                                *g += d;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Primitive::Transpose => {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                acc(inputs[0], &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Primitive::BiasAdd { axis } | Primitive::BiasMul { axis } => {
                let add = matches!(op, Primitive::BiasAdd { .. });
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let bias = self.value(inputs[1]).data();
                acc(inputs[0], &mut |g| {
                    if add {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    } else {
                        for o in 0..outer {
                            for t in 0..n {
                                let base = (o * n + t) * inner;
                                for i in base..base + inner {
                                    g[i] += dy[i] * bias[t];
                                }
                            }
                        }
                    }
                });
                acc(inputs[1], &mut |g| {
                    for o in 0..outer {
                        for t in 0..n {
                            let base = (o * n + t) * inner;
                            g[t] += if add {
                                dy[base..base + inner].iter().sum::<f64>()
                            } else {
                                (base..base + inner).map(|i| dy[i] * xd[i]).sum::<f64>()
                            };
                        }
                    }
                });
            }
            Primitive::Narrow { axis, start, len } => {
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                acc(inputs[0], &mut |g| {
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        let from = o * len * inner;
                        for (g, d) in g[to..to + len * inner].iter_mut().zip(&dy[from..from + len * inner]) {
                            *g += d;
                        }
                    }
                });
            }
            Primitive::Gather(indices) => acc(inputs[0], &mut |g| {
                for (&i, d) in indices.iter().zip(dy) {
                    g[i] += d;
                }
            }),
            Primitive::Clamp { lo, hi } => acc(inputs[0], &mut |g| {
                for ((g, d), a) in g.iter_mut().zip(dy).zip(xd) {
                    if a > lo && a < hi {
                        *g += d;
                    }
                }
            }),
            Primitive::Powf(p) => acc(inputs[0], &mut |g| {
                for ((g, d), a) in g.iter_mut().zip(dy).zip(xd) {
                    *g += d * p * a.powf(p - 1.0);
                }
            }),
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        inputs: &[Var],
        kernel: usize,
        stride: usize,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (x, w) = (self.value(inputs[0]), self.value(inputs[1]));
        let (batch, g, out_ch) = conv_geometry("conv2d", x.shape(), w.shape(), kernel, stride)?;
        let in_len = g.channels * g.height * g.width;
        let (patch, positions) = (g.patch_len(), g.positions());
        let want_x = self.nodes[inputs[0].0].requires_grad;
        let want_w = self.nodes[inputs[1].0].requires_grad;
        let mut dw = want_w.then(|| vec![0.0; w.numel()]);
        let mut dx = want_x.then(|| vec![0.0; x.numel()]);
        for b in 0..batch {
            let image = &x.data()[b * in_len..(b + 1) * in_len];
            let dout = &dy[b * out_ch * positions..(b + 1) * out_ch * positions];
            if let Some(dw) = dw.as_mut() {
                // dW = dOut · colsᵀ
                if g.is_pointwise() {
                    gemm(out_ch, positions, patch, dout, (positions, 1), image, (1, positions), 1.0, dw);
                } else {
                    let cols = im2col(image, &g);
                    gemm(out_ch, positions, patch, dout, (positions, 1), &cols, (1, positions), 1.0, dw);
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · dOut
                let dst = &mut dx[b * in_len..(b + 1) * in_len];
                if g.is_pointwise() {
                    gemm(patch, out_ch, positions, w.data(), (1, patch), dout, (positions, 1), 1.0, dst);
                } else {
                    let mut dcols = vec![0.0; patch * positions];
                    gemm(patch, out_ch, positions, w.data(), (1, patch), dout, (positions, 1), 0.0, &mut dcols);
                    col2im_add(&dcols, &g, dst);
                }
            }
        }
        for (v, d) in [(inputs[0], dx), (inputs[1], dw)] {
            if let Some(d) = d {
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, d)| *e += d),
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(())
    }
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 spatial axes, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Named convenience wrappers over [`Graph::apply`].
impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(Primitive::Conv3x3 { stride }, &[x, w])
    }

    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(Primitive::Conv1x1, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax { axis }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Upsample2x, &[x])
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::AvgPool2x, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LayerNorm { axis }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::BiasAdd { axis }, &[x, bias])
    }

    pub fn bias_mul(&mut self, x: Var, gain: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::BiasMul { axis }, &[x, gain])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Narrow { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.into()), &[x])
    }

    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather(indices), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.apply(Primitive::Powf(p), &[x])
    }

    /// `x · w + b` for token-major `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.bias_add(y, b, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.7, 0.7, 0.7]));
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_center_kernel_preserves_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64 * 0.3 - 2.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv3x3(x, w, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![2, 8, 6]));
        let w = g.constant(Tensor::ones(vec![5, 2, 3, 3]));
        let y = g.conv3x3(x, w, 2).unwrap();
        assert_eq!(g.shape(y), &[5, 4, 3]);
        // interior output sees a full 3×3×2 window of ones
        assert_eq!(g.value(y).data()[4], 18.0);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.mul(x, a).unwrap(); // 3x²
        let c = g.add(b, x).unwrap(); // 3x² + x
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[13.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(vec![2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        let back = g.narrow(c, 1, 3, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }
}
