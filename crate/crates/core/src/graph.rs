//! Reverse-mode differentiation over a flat tape of tensor primitives.
//!
//! Ops evaluate eagerly as the tape is built, so node order is already
//! topological; `backward` walks it once in reverse. Leaves can be mutated
//! afterwards and the whole tape re-evaluated with [`Graph::replay`], which
//! is what the central-difference checker relies on.
//!
//! The primitive set is deliberately small: dense affine maps, 2-D
//! convolution, average pooling, nearest-neighbor upsampling, channel
//! concatenation, a handful of elementwise maps, and sum/mean reductions.
//! There is no broadcasting beyond single-element scalars.

use crate::kernels;
use crate::tensor::{Tensor, TensorError};
use std::fmt;

/// Inputs to `exp` are saturated to this symmetric range; the saturation has
/// zero gradient outside it.
pub const EXP_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable leaf; receives a gradient from `backward`.
    Parameter,
    /// Non-trainable data leaf that may still be perturbed and replayed.
    Input,
    /// Fixed value; gradients are neither tracked nor reported.
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    AvgPool2d { x: NodeId, kh: usize, kw: usize, stride: usize },
    UpsampleNearest { x: NodeId, factor: usize },
    ConcatChannels { parts: Vec<NodeId> },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Neg { x: NodeId },
    Abs { x: NodeId },
    Square { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Layout-only adapter; performs no arithmetic.
    Reshape { x: NodeId, shape: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Neg { .. } => "neg",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    Tensor(TensorError),
    UnknownNode { node: usize },
    ShapeMismatch { op: &'static str, node: usize, detail: String },
    NonFiniteValue { op: &'static str, node: usize },
    NotALeaf { node: usize },
    StaleForward,
    NonScalarLoss { node: usize, shape: Vec<usize> },
    EpsilonOutOfRange { epsilon: f64 },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "{e}"),
            Self::UnknownNode { node } => write!(f, "unknown node {node}"),
            Self::ShapeMismatch { op, node, detail } => {
                write!(f, "shape mismatch at node {node} ({op}): {detail}")
            }
            Self::NonFiniteValue { op, node } => {
                write!(f, "non-finite value produced at node {node} ({op})")
            }
            Self::NotALeaf { node } => write!(f, "node {node} is not a leaf"),
            Self::StaleForward => write!(f, "leaf values changed since last evaluation; replay first"),
            Self::NonScalarLoss { node, shape } => {
                write!(f, "loss node {node} has shape {shape:?}, expected a scalar")
            }
            Self::EpsilonOutOfRange { epsilon } => {
                write!(f, "epsilon {epsilon} outside [1e-7, 1e-3]")
            }
        }
    }
}

impl std::error::Error for GraphError {}

impl From<TensorError> for GraphError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A tape of primitive applications with eagerly computed values.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grads_valid: bool,
    dirty: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grads_valid: false,
            dirty: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_id(&self, id: NodeId) -> Result<(), GraphError> {
        if id.0 >= self.nodes.len() {
            Err(GraphError::UnknownNode { node: id.0 })
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, GraphError> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(GraphError::NonFiniteValue { op: op.name(), node });
        }
        self.nodes.push(Node { op, value });
        self.grads_valid = false;
        Ok(NodeId(node))
    }

    // ---- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Result<NodeId, GraphError> {
        self.push(Op::Leaf(kind), value)
    }

    pub fn parameter(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.leaf(value, LeafKind::Parameter)
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.leaf(value, LeafKind::Constant)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<NodeId, GraphError> {
        self.constant(Tensor::scalar(value))
    }

    /// Parameter leaves in insertion order.
    pub fn parameters(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf(LeafKind::Parameter)))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Replaces a leaf's value; the tape must be replayed before reuse.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<(), GraphError> {
        self.check_id(id)?;
        match self.nodes[id.0].op {
            Op::Leaf(_) => {}
            _ => return Err(GraphError::NotALeaf { node: id.0 }),
        }
        if value.shape() != self.nodes[id.0].value.shape() {
            return Err(GraphError::ShapeMismatch {
                op: "leaf",
                node: id.0,
                detail: format!(
                    "leaf has shape {:?}, new value has shape {:?}",
                    self.nodes[id.0].value.shape(),
                    value.shape()
                ),
            });
        }
        if !value.all_finite() {
            return Err(GraphError::NonFiniteValue { op: "leaf", node: id.0 });
        }
        self.nodes[id.0].value = value;
        self.dirty = true;
        self.grads_valid = false;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor, GraphError> {
        self.check_id(id)?;
        Ok(&self.nodes[id.0].value)
    }

    /// Gradient of the last backward pass at `id`. Parameters untouched by the
    /// loss report a zero tensor of their own shape.
    pub fn grad(&self, id: NodeId) -> Result<Tensor, GraphError> {
        self.check_id(id)?;
        if !self.grads_valid {
            return Err(GraphError::StaleForward);
        }
        Ok(match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        })
    }

    // ---- primitive applications -------------------------------------------

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, detail: String) -> GraphError {
        GraphError::ShapeMismatch { op, node: self.nodes.len(), detail }
    }

    fn require_rank(&self, op: &'static str, id: NodeId, rank: usize) -> Result<(), GraphError> {
        let s = self.shape_of(id);
        if s.len() != rank {
            return Err(self.mismatch(op, format!("node {} has shape {s:?}, expected rank {rank}", id.0)));
        }
        Ok(())
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        for id in [x, w, b] {
            self.check_id(id)?;
        }
        self.require_rank("dense", x, 1)?;
        self.require_rank("dense", w, 2)?;
        self.require_rank("dense", b, 1)?;
        let (xs, ws, bs) = (self.shape_of(x), self.shape_of(w), self.shape_of(b));
        if ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(self.mismatch(
                "dense",
                format!("weight {ws:?} incompatible with input {xs:?} and bias {bs:?}"),
            ));
        }
        let value = kernels::dense_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        self.push(Op::Dense { x, w, b }, value)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        for id in [x, w, b] {
            self.check_id(id)?;
        }
        self.require_rank("conv2d", x, 3)?;
        self.require_rank("conv2d", w, 4)?;
        self.require_rank("conv2d", b, 1)?;
        if stride == 0 {
            return Err(self.mismatch("conv2d", "stride must be positive".into()));
        }
        let (xs, ws, bs) = (self.shape_of(x), self.shape_of(w), self.shape_of(b));
        if ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(self.mismatch(
                "conv2d",
                format!("weight {ws:?} incompatible with input {xs:?} and bias {bs:?}"),
            ));
        }
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[3] {
            return Err(self.mismatch(
                "conv2d",
                format!("kernel {ws:?} larger than padded input {xs:?}"),
            ));
        }
        let value = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        self.push(Op::Conv2d { x, w, b, stride, pad }, value)
    }

    pub fn avg_pool2d(&mut self, x: NodeId, kh: usize, kw: usize, stride: usize) -> Result<NodeId, GraphError> {
        self.check_id(x)?;
        self.require_rank("avg_pool2d", x, 3)?;
        let xs = self.shape_of(x);
        if kh == 0 || kw == 0 || stride == 0 || kh > xs[1] || kw > xs[2] {
            return Err(self.mismatch(
                "avg_pool2d",
                format!("window {kh}x{kw} stride {stride} invalid for input {xs:?}"),
            ));
        }
        let value = kernels::avg_pool2d_forward(&self.nodes[x.0].value, kh, kw, stride);
        self.push(Op::AvgPool2d { x, kh, kw, stride }, value)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId, GraphError> {
        self.check_id(x)?;
        self.require_rank("upsample_nearest", x, 3)?;
        if factor == 0 {
            return Err(self.mismatch("upsample_nearest", "factor must be positive".into()));
        }
        let value = kernels::upsample_nearest_forward(&self.nodes[x.0].value, factor);
        self.push(Op::UpsampleNearest { x, factor }, value)
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(self.mismatch("concat_channels", "no inputs".into()));
        }
        for &id in parts {
            self.check_id(id)?;
            self.require_rank("concat_channels", id, 3)?;
        }
        let (h, w) = (self.shape_of(parts[0])[1], self.shape_of(parts[0])[2]);
        for &id in parts {
            let s = self.shape_of(id);
            if s[1] != h || s[2] != w {
                return Err(self.mismatch(
                    "concat_channels",
                    format!("node {} has spatial size {:?}, expected {h}x{w}", id.0, &s[1..]),
                ));
            }
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = kernels::concat_channels(&tensors);
        self.push(Op::ConcatChannels { parts: parts.to_vec() }, value)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, GraphError> {
        self.check_id(x)?;
        let data: Vec<f64> = self.nodes[x.0].value.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape_of(x).to_vec(), data)
            .map_err(|_| GraphError::NonFiniteValue { op: op.name(), node: self.nodes.len() })?;
        self.push(op, value)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Relu { x }, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Exponential with hard input saturation at `±EXP_CLAMP`.
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Exp { x }, x, |v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Neg { x }, x, |v| -v)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Abs { x }, x, f64::abs)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Op::Square { x }, x, |v| v * v)
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>, GraphError> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let (na, nb): (usize, usize) = (sa.iter().product(), sb.iter().product());
        if sa == sb {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else if nb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(self.mismatch(op, format!("operands {sa:?} and {sb:?} neither match nor are scalar")))
        }
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId, GraphError> {
        self.check_id(a)?;
        self.check_id(b)?;
        let out_shape = self.binary_shapes(op.name(), a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if va.is_scalar() {
            let x = va.item();
            vb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            let y = vb.item();
            va.data().iter().map(|&x| f(x, y)).collect()
        };
        let node = self.nodes.len();
        let value = Tensor::new(out_shape, data)
            .map_err(|_| GraphError::NonFiniteValue { op: op.name(), node })?;
        self.push(op, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Add { a, b }, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Sub { a, b }, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Mul { a, b }, a, b, |x, y| x * y)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_id(x)?;
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let node = self.nodes.len();
        if !total.is_finite() {
            return Err(GraphError::NonFiniteValue { op: "sum", node });
        }
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check_id(x)?;
        let v = &self.nodes[x.0].value;
        let m: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let node = self.nodes.len();
        if !m.is_finite() {
            return Err(GraphError::NonFiniteValue { op: "mean", node });
        }
        self.push(Op::Mean { x }, Tensor::scalar(m))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        self.check_id(x)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() || shape.iter().any(|&d| d == 0) {
            return Err(self.mismatch(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape_of(x)),
            ));
        }
        let value = self.nodes[x.0].value.reshaped(shape.clone())?;
        self.push(Op::Reshape { x, shape }, value)
    }

    // ---- compositions ------------------------------------------------------

    /// Piecewise-linear squashing into (0, 1): slope 0.2 around zero,
    /// saturating at ±2.5. Built from relu and affine steps.
    pub fn hard_sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let fifth = self.constant_scalar(0.2)?;
        let half = self.constant_scalar(0.5)?;
        let one = self.constant_scalar(1.0)?;
        let scaled = self.mul(x, fifth)?;
        let shifted = self.add(scaled, half)?;
        let lower = self.relu(shifted)?;
        let flipped = self.sub(one, lower)?;
        let upper = self.relu(flipped)?;
        self.sub(one, upper)
    }

    /// Hard clamp to `[lo, hi]` with zero gradient outside.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        assert!(lo < hi);
        let lo_c = self.constant_scalar(lo)?;
        let hi_c = self.constant_scalar(hi)?;
        let over_lo = self.sub(x, lo_c)?;
        let over_lo = self.relu(over_lo)?;
        let over_hi = self.sub(x, hi_c)?;
        let over_hi = self.relu(over_hi)?;
        let kept = self.sub(over_lo, over_hi)?;
        self.add(lo_c, kept)
    }

    // ---- evaluation --------------------------------------------------------

    fn eval_op(&self, op: &Op) -> Tensor {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf(_) => unreachable!("leaves are not re-evaluated"),
            Op::Dense { x, w, b } => kernels::dense_forward(v(x), v(w), v(b)),
            Op::Conv2d { x, w, b, stride, pad } => {
                kernels::conv2d_forward(v(x), v(w), v(b), *stride, *pad)
            }
            Op::AvgPool2d { x, kh, kw, stride } => {
                kernels::avg_pool2d_forward(v(x), *kh, *kw, *stride)
            }
            Op::UpsampleNearest { x, factor } => kernels::upsample_nearest_forward(v(x), *factor),
            Op::ConcatChannels { parts } => {
                let tensors: Vec<&Tensor> = parts.iter().map(v).collect();
                kernels::concat_channels(&tensors)
            }
            Op::Relu { x } => map_unary(v(x), |t| if t > 0.0 { t } else { 0.0 }),
            Op::Exp { x } => map_unary(v(x), |t| t.clamp(-EXP_CLAMP, EXP_CLAMP).exp()),
            Op::Neg { x } => map_unary(v(x), |t| -t),
            Op::Abs { x } => map_unary(v(x), f64::abs),
            Op::Square { x } => map_unary(v(x), |t| t * t),
            Op::Add { a, b } => map_binary(v(a), v(b), |x, y| x + y),
            Op::Sub { a, b } => map_binary(v(a), v(b), |x, y| x - y),
            Op::Mul { a, b } => map_binary(v(a), v(b), |x, y| x * y),
            Op::Sum { x } => Tensor::scalar(v(x).data().iter().sum()),
            Op::Mean { x } => Tensor::scalar(v(x).data().iter().sum::<f64>() / v(x).numel() as f64),
            Op::Reshape { x, shape } => v(x).reshaped(shape.clone()).unwrap(),
        }
    }

    /// Recomputes every non-leaf value in tape order after leaf mutations.
    pub fn replay(&mut self) -> Result<(), GraphError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let value = self.eval_op(&self.nodes[i].op);
            if !value.all_finite() {
                return Err(GraphError::NonFiniteValue {
                    op: self.nodes[i].op.name(),
                    node: i,
                });
            }
            self.nodes[i].value = value;
        }
        self.dirty = false;
        self.grads_valid = false;
        Ok(())
    }

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        self.check_id(loss)?;
        if self.dirty {
            return Err(GraphError::StaleForward);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(GraphError::NonScalarLoss {
                node: loss.0,
                shape: loss_value.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
        self.grads_valid = true;
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, g: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let val = |id: &NodeId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Leaf(_) => {}
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = kernels::dense_backward(val(x), val(w), dy);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(x), val(w), *stride, *pad, dy);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::AvgPool2d { x, kh, kw, stride } => {
                acc(grads, *x, kernels::avg_pool2d_backward(val(x), *kh, *kw, *stride, dy));
            }
            Op::UpsampleNearest { x, factor } => {
                acc(grads, *x, kernels::upsample_nearest_backward(val(x), *factor, dy));
            }
            Op::ConcatChannels { parts } => {
                let (h, w) = (dy.shape()[1], dy.shape()[2]);
                let mut offset = 0;
                for part in parts {
                    let c = val(part).shape()[0];
                    let slice = dy.data()[offset * h * w..(offset + c) * h * w].to_vec();
                    acc(grads, *part, Tensor::new(vec![c, h, w], slice).unwrap());
                    offset += c;
                }
            }
            Op::Relu { x } => {
                let g = zip_grad(val(x), dy, |xv, d| if xv > 0.0 { d } else { 0.0 });
                acc(grads, *x, g);
            }
            Op::Exp { x } => {
                let g = zip_grad(val(x), dy, |xv, d| {
                    if xv.abs() <= EXP_CLAMP {
                        xv.exp() * d
                    } else {
                        0.0
                    }
                });
                acc(grads, *x, g);
            }
            Op::Neg { x } => acc(grads, *x, zip_grad(val(x), dy, |_, d| -d)),
            Op::Abs { x } => {
                let g = zip_grad(val(x), dy, |xv, d| {
                    if xv > 0.0 {
                        d
                    } else if xv < 0.0 {
                        -d
                    } else {
                        0.0
                    }
                });
                acc(grads, *x, g);
            }
            Op::Square { x } => acc(grads, *x, zip_grad(val(x), dy, |xv, d| 2.0 * xv * d)),
            Op::Add { a, b } => {
                acc(grads, *a, reduce_for(val(a), dy, |d| d));
                acc(grads, *b, reduce_for(val(b), dy, |d| d));
            }
            Op::Sub { a, b } => {
                acc(grads, *a, reduce_for(val(a), dy, |d| d));
                acc(grads, *b, reduce_for(val(b), dy, |d| -d));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(a), val(b));
                let ga = mul_grad(va, vb, dy);
                let gb = mul_grad(vb, va, dy);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Sum { x } => {
                let g = dy.item();
                acc(grads, *x, Tensor::filled(val(x).shape().to_vec(), g));
            }
            Op::Mean { x } => {
                let g = dy.item() / val(x).numel() as f64;
                acc(grads, *x, Tensor::filled(val(x).shape().to_vec(), g));
            }
            Op::Reshape { x, .. } => {
                acc(grads, *x, dy.reshaped(val(x).shape().to_vec()).unwrap());
            }
        }
    }

    /// Central-difference audit of `backward` over every parameter element.
    ///
    /// Returns the maximum of `|analytic - central| / max(1, |central|)`.
    pub fn finite_diff_check(&mut self, loss: NodeId, epsilon: f64) -> Result<f64, GraphError> {
        if !(1e-7..=1e-3).contains(&epsilon) {
            return Err(GraphError::EpsilonOutOfRange { epsilon });
        }
        if self.dirty {
            self.replay()?;
        }
        self.backward(loss)?;
        let params = self.parameters();
        let analytic: Vec<Tensor> = params
            .iter()
            .map(|&p| self.grad(p))
            .collect::<Result<_, _>>()?;
        let mut max_err: f64 = 0.0;
        for (pi, &p) in params.iter().enumerate() {
            for e in 0..self.nodes[p.0].value.numel() {
                let orig = self.nodes[p.0].value.data()[e];
                self.nodes[p.0].value.data_mut()[e] = orig + epsilon;
                self.replay()?;
                let up = self.nodes[loss.0].value.item();
                self.nodes[p.0].value.data_mut()[e] = orig - epsilon;
                self.replay()?;
                let down = self.nodes[loss.0].value.item();
                self.nodes[p.0].value.data_mut()[e] = orig;
                let central = (up - down) / (2.0 * epsilon);
                let err = (analytic[pi].data()[e] - central).abs() / central.abs().max(1.0);
                max_err = max_err.max(err);
            }
        }
        self.replay()?;
        self.backward(loss)?;
        Ok(max_err)
    }
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("unary op produced non-finite value")
}

fn map_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    } else if a.is_scalar() {
        let x = a.item();
        let data: Vec<f64> = b.data().iter().map(|&y| f(x, y)).collect();
        Tensor::new(b.shape().to_vec(), data).unwrap()
    } else {
        let y = b.item();
        let data: Vec<f64> = a.data().iter().map(|&x| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    }
}

fn zip_grad(x: &Tensor, dy: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().zip(dy.data()).map(|(&xv, &d)| f(xv, d)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Gradient flowing to an operand of a broadcasting binary op: identity when
/// shapes match, summed when the operand was a broadcast scalar.
fn reduce_for(operand: &Tensor, dy: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    if operand.shape() == dy.shape() {
        let data: Vec<f64> = dy.data().iter().map(|&d| f(d)).collect();
        Tensor::new(operand.shape().to_vec(), data).unwrap()
    } else {
        debug_assert!(operand.is_scalar());
        Tensor::new(
            operand.shape().to_vec(),
            vec![dy.data().iter().map(|&d| f(d)).sum()],
        )
        .unwrap()
    }
}

/// Gradient to `target` of `target * other` given upstream `dy`.
fn mul_grad(target: &Tensor, other: &Tensor, dy: &Tensor) -> Tensor {
    if target.shape() == dy.shape() {
        if other.is_scalar() && !target.is_scalar() {
            let o = other.item();
            let data: Vec<f64> = dy.data().iter().map(|&d| o * d).collect();
            Tensor::new(target.shape().to_vec(), data).unwrap()
        } else {
            let data: Vec<f64> = dy.data().iter().zip(other.data()).map(|(&d, &o)| o * d).collect();
            Tensor::new(target.shape().to_vec(), data).unwrap()
        }
    } else {
        // target was the broadcast scalar
        debug_assert!(target.is_scalar());
        let total: f64 = dy.data().iter().zip(other.data()).map(|(&d, &o)| o * d).sum();
        Tensor::new(target.shape().to_vec(), vec![total]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_param(g: &mut Graph, v: f64) -> NodeId {
        g.parameter(Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn square_forward_and_gradient() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 3.0);
        let y = g.square(x).unwrap();
        assert_eq!(g.value(y).unwrap().item(), 9.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn exp_of_negated_zero_is_one() {
        let mut g = Graph::new();
        let s = scalar_param(&mut g, 0.0);
        let n = g.neg(s).unwrap();
        let y = g.exp(n).unwrap();
        assert_eq!(g.value(y).unwrap().item(), 1.0);
    }

    #[test]
    fn weighted_residual_plus_penalty_hand_value() {
        // e^{-s}(y - p)^2 + s with p=1, y=2, s=0 evaluates to 1.
        let mut g = Graph::new();
        let p = scalar_param(&mut g, 1.0);
        let s = scalar_param(&mut g, 0.0);
        let y = g.constant_scalar(2.0).unwrap();
        let r = g.sub(y, p).unwrap();
        let r2 = g.square(r).unwrap();
        let ns = g.neg(s).unwrap();
        let w = g.exp(ns).unwrap();
        let wr = g.mul(w, r2).unwrap();
        let out = g.add(wr, s).unwrap();
        assert_eq!(g.value(out).unwrap().item(), 1.0);
    }

    #[test]
    fn penalty_gradient_vanishes_at_log_square_residual() {
        // d/ds of e^{-s}*4 + s is zero at s = ln 4.
        let mut g = Graph::new();
        let s = scalar_param(&mut g, 4.0_f64.ln());
        let four = g.constant_scalar(4.0).unwrap();
        let ns = g.neg(s).unwrap();
        let w = g.exp(ns).unwrap();
        let t = g.mul(w, four).unwrap();
        let out = g.add(t, s).unwrap();
        g.backward(out).unwrap();
        assert!(g.grad(s).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn chain_rule_through_squared_residual() {
        // d/dp of (2 - p)^2 at p=1 is -2.
        let mut g = Graph::new();
        let p = scalar_param(&mut g, 1.0);
        let two = g.constant_scalar(2.0).unwrap();
        let r = g.sub(two, p).unwrap();
        let out = g.square(r).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(p).unwrap().item(), -2.0);
        let err = g.finite_diff_check(out, 1e-5).unwrap();
        assert!(err < 1e-6, "finite difference disagreement {err}");
    }

    #[test]
    fn finite_diff_exact_for_quadratic() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 3.0);
        let y = g.square(x).unwrap();
        let err = g.finite_diff_check(y, 1e-5).unwrap();
        assert!(err < 1e-6, "quadratic central difference should be near-exact, got {err}");
    }

    #[test]
    fn constant_graph_has_zero_error_and_zero_grads() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 5.0);
        let c = g.constant_scalar(7.0).unwrap();
        let y = g.sum(c).unwrap();
        let err = g.finite_diff_check(y, 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(g.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = scalar_param(&mut g, 2.0);
        let unused = g
            .parameter(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let y = g.square(used).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    fn random_dense_relu_graph(seed: u64) -> (Graph, NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let dims = [5usize, 6, 4, 3];
        let mut x = g
            .input(Tensor::new(
                vec![dims[0]],
                (0..dims[0]).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            ).unwrap())
            .unwrap();
        for layer in 0..3 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let w = g
                .parameter(Tensor::new(
                    vec![fan_out, fan_in],
                    (0..fan_out * fan_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                ).unwrap())
                .unwrap();
            let b = g
                .parameter(Tensor::new(
                    vec![fan_out],
                    (0..fan_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                ).unwrap())
                .unwrap();
            x = g.dense(x, w, b).unwrap();
            if layer < 2 {
                x = g.relu(x).unwrap();
            }
        }
        let sq = g.square(x).unwrap();
        let loss = g.mean(sq).unwrap();
        (g, loss)
    }

    #[test]
    fn dense_relu_stack_passes_finite_diff() {
        // ~100 parameters across three affine layers.
        for seed in 0..3 {
            let (mut g, loss) = random_dense_relu_graph(seed);
            let err = g.finite_diff_check(loss, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: finite diff error {err}");
        }
    }

    #[test]
    fn conv_pool_upsample_concat_pass_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(
                vec![2, 4, 4],
                (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            ).unwrap())
            .unwrap();
        let w = g
            .parameter(Tensor::new(
                vec![3, 2, 3, 3],
                (0..54).map(|_| rng.gen_range(-0.7..0.7)).collect(),
            ).unwrap())
            .unwrap();
        let b = g
            .parameter(Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap())
            .unwrap();
        let c = g.conv2d(x, w, b, 2, 1).unwrap(); // [3,2,2]
        let r = g.relu(c).unwrap();
        let p = g.avg_pool2d(r, 2, 2, 2).unwrap(); // [3,1,1]
        let u = g.upsample_nearest(p, 2).unwrap(); // [3,2,2]
        let cat = g.concat_channels(&[r, u]).unwrap(); // [6,2,2]
        let sq = g.square(cat).unwrap();
        let loss = g.mean(sq).unwrap();
        let err = g.finite_diff_check(loss, 1e-5).unwrap();
        assert!(err < 1e-4, "finite diff error {err}");
    }

    #[test]
    fn abs_exp_clamp_compositions_pass_finite_diff() {
        let mut g = Graph::new();
        // Points kept away from the kinks of abs, clamp, and hard_sigmoid.
        let x = g
            .parameter(Tensor::new(vec![4], vec![-2.0, -0.5, 0.75, 1.9]).unwrap())
            .unwrap();
        let a = g.abs(x).unwrap();
        let n = g.neg(x).unwrap();
        let e = g.exp(n).unwrap();
        let cl = g.clamp(x, -1.0, 1.5).unwrap();
        let hs = g.hard_sigmoid(x).unwrap();
        let s1 = g.add(a, e).unwrap();
        let s2 = g.add(cl, hs).unwrap();
        let both = g.mul(s1, s2).unwrap();
        let loss = g.sum(both).unwrap();
        let err = g.finite_diff_check(loss, 1e-5).unwrap();
        assert!(err < 1e-4, "finite diff error {err}");
    }

    #[test]
    fn linear_combination_of_losses_has_linear_gradient() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g)
        let build = |g: &mut Graph| -> (NodeId, NodeId, NodeId) {
            let x = g
                .parameter(Tensor::new(vec![3], vec![0.4, -1.2, 2.0]).unwrap())
                .unwrap();
            let sq = g.square(x).unwrap();
            let f = g.sum(sq).unwrap();
            let ab = g.abs(x).unwrap();
            let h = g.mean(ab).unwrap();
            (x, f, h)
        };
        let (a, b) = (2.5, -0.75);

        let mut g1 = Graph::new();
        let (x1, f1, _) = build(&mut g1);
        g1.backward(f1).unwrap();
        let gf = g1.grad(x1).unwrap();

        let mut g2 = Graph::new();
        let (x2, _, h2) = build(&mut g2);
        g2.backward(h2).unwrap();
        let gh = g2.grad(x2).unwrap();

        let mut g3 = Graph::new();
        let (x3, f3, h3) = build(&mut g3);
        let ca = g3.constant_scalar(a).unwrap();
        let cb = g3.constant_scalar(b).unwrap();
        let af = g3.mul(ca, f3).unwrap();
        let bh = g3.mul(cb, h3).unwrap();
        let total = g3.add(af, bh).unwrap();
        g3.backward(total).unwrap();
        let combined = g3.grad(x3).unwrap();

        for i in 0..3 {
            let expect = a * gf.data()[i] + b * gh.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let (mut g, loss) = random_dense_relu_graph(11);
            g.backward(loss).unwrap();
            let p = g.parameters()[0];
            (g.value(loss).unwrap().data().to_vec(), g.grad(p).unwrap().data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn shape_mismatch_names_offending_node() {
        let mut g = Graph::new();
        let a = g.parameter(Tensor::zeros(vec![2])).unwrap();
        let b = g.parameter(Tensor::zeros(vec![3])).unwrap();
        match g.add(a, b) {
            Err(GraphError::ShapeMismatch { op, node, .. }) => {
                assert_eq!(op, "add");
                assert_eq!(node, 2);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut g = Graph::new();
        assert!(g
            .input(Tensor::scalar(1.0))
            .and_then(|id| g.set_leaf(id, Tensor::scalar(2.0)))
            .is_ok());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_stale_forward() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::NonScalarLoss { .. })));
        let loss = g.sum(y).unwrap();
        g.set_leaf(x, Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(g.backward(loss), Err(GraphError::StaleForward)));
        g.replay().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.value(loss).unwrap().item(), 1.0);
    }

    #[test]
    fn exp_saturates_with_zero_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::new(vec![2], vec![45.0, -45.0]).unwrap()).unwrap();
        let e = g.exp(x).unwrap();
        let loss = g.sum(e).unwrap();
        assert!(g.value(e).unwrap().data()[0] <= EXP_CLAMP.exp());
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn epsilon_bounds_enforced() {
        let mut g = Graph::new();
        let x = scalar_param(&mut g, 1.0);
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.finite_diff_check(y, 1e-2),
            Err(GraphError::EpsilonOutOfRange { .. })
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn elementwise_primitives_pass_finite_diff(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            // Inputs in [-3, 3], kept away from the relu kink.
            let data: Vec<f64> = (0..6)
                .map(|_| {
                    let mut v: f64 = rng.gen_range(-3.0..3.0);
                    if v.abs() < 1e-3 {
                        v += 2e-3;
                    }
                    v
                })
                .collect();
            let x = g.parameter(Tensor::new(vec![6], data).unwrap()).unwrap();
            let r = g.relu(x).unwrap();
            let e = g.exp(x).unwrap();
            let q = g.square(x).unwrap();
            let a = g.abs(x).unwrap();
            let n = g.neg(x).unwrap();
            let t1 = g.add(r, e).unwrap();
            let t2 = g.sub(q, a).unwrap();
            let t3 = g.mul(t1, t2).unwrap();
            let t4 = g.add(t3, n).unwrap();
            let loss = g.mean(t4).unwrap();
            let err = g.finite_diff_check(loss, 1e-5).unwrap();
            proptest::prop_assert!(err < 1e-4, "finite diff error {}", err);
        }
    }
}
