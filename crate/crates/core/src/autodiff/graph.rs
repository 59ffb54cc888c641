use std::collections::HashSet;

use super::kernels::{Conv1dGeom, Conv2dGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Clamp margin applied before `arccos`.
pub const ARCCOS_EPS: f64 = 1e-7;

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is expanded to the left's shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// rhs `[R, 1]` over lhs `[R, C]`.
    Column,
    /// rhs `[1, C]` over lhs `[R, C]`.
    Row,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
    Max,
    LogSumExp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Arccos,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input {
        name: String,
        differentiable: bool,
    },
    Constant(Tensor),
    Binary {
        kind: BinaryKind,
        lhs: NodeId,
        rhs: NodeId,
        broadcast: Broadcast,
    },
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Reduce {
        kind: ReduceKind,
        x: NodeId,
        axis: usize,
    },
    SumAll {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        target: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        geom: Conv1dGeom,
        out_channels: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: Conv2dGeom,
        out_channels: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Affine { .. } => "affine",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Arccos => "arccos",
            },
            Op::Clamp { .. } => "clamp",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::MatMul { .. } => "matmul",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => "sum",
                ReduceKind::Mean => "mean",
                ReduceKind::Max => "max",
                ReduceKind::LogSumExp => "logsumexp",
            },
            Op::SumAll { .. } => "sum_all",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
        }
    }

    pub(crate) fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::Binary { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, target } => vec![*logits, *target],
            Op::Conv1d { x, w, .. } | Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Affine { x, .. }
            | Op::Unary { x, .. }
            | Op::Clamp { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Reshape { x }
            | Op::Reduce { x, .. }
            | Op::SumAll { x } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

/// A topologically ordered computation over named input tensors.
///
/// Nodes can only reference nodes created before them, so insertion order
/// is a valid evaluation order. Shapes are inferred while building; a
/// graph that builds successfully only fails at evaluation on unbound or
/// mis-shaped inputs and non-finite intermediates.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    input_names: HashSet<String>,
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Input { differentiable, .. } => *differentiable,
            Op::Constant(_) => false,
            other => other
                .operands()
                .iter()
                .any(|id| self.nodes[id.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(shape_err(
                self.nodes.len(),
                op,
                format!("operand {} does not exist", id.0),
            ));
        }
        Ok(())
    }

    pub fn input(&mut self, name: &str, shape: &[usize], differentiable: bool) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err(
                self.nodes.len(),
                "input",
                format!("input `{name}` has invalid shape {shape:?}"),
            ));
        }
        if !self.input_names.insert(name.to_string()) {
            return Err(Error::DuplicateInput(name.to_string()));
        }
        Ok(self.push(
            Op::Input {
                name: name.to_string(),
                differentiable,
            },
            shape.to_vec(),
        ))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn binary(&mut self, kind: BinaryKind, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        self.check(lhs, name)?;
        self.check(rhs, name)?;
        let ls = self.shape(lhs).to_vec();
        let rs = self.shape(rhs);
        let broadcast = if ls == rs {
            Broadcast::Same
        } else if rs.iter().product::<usize>() == 1 {
            Broadcast::Scalar
        } else if ls.len() == 2 && rs.len() == 2 && rs[0] == ls[0] && rs[1] == 1 {
            Broadcast::Column
        } else if ls.len() == 2 && rs.len() == 2 && rs[0] == 1 && rs[1] == ls[1] {
            Broadcast::Row
        } else {
            return Err(shape_err(
                self.nodes.len(),
                name,
                format!("cannot broadcast {rs:?} onto {ls:?}"),
            ));
        };
        Ok(self.push(
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            },
            ls,
        ))
    }

    /// Elementwise `lhs + rhs`; `rhs` may be a scalar, or a `[R,1]` column /
    /// `[1,C]` row expanded over a `[R,C]` lhs.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, lhs, rhs)
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, lhs, rhs)
    }

    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, lhs, rhs)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.check(x, "affine")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Affine { x, scale, shift }, shape))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(x, factor, 0.0)
    }

    fn unary(&mut self, kind: UnaryKind, x: NodeId) -> Result<NodeId> {
        self.check(x, "unary")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Unary { kind, x }, shape))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// `arccos` of the input clamped to `[-1 + ε, 1 - ε]`, `ε = ARCCOS_EPS`.
    pub fn arccos(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Arccos, x)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.check(x, "clamp")?;
        if !(lo <= hi) {
            return Err(shape_err(
                self.nodes.len(),
                "clamp",
                format!("empty range [{lo}, {hi}]"),
            ));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Clamp { x, lo, hi }, shape))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.check(x, "leaky_relu")?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LeakyRelu { x, slope }, shape))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                self.nodes.len(),
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul { a, b }, shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x, "reshape")?;
        let from = self.shape(x);
        if shape.is_empty()
            || shape.contains(&0)
            || shape.iter().product::<usize>() != from.iter().product::<usize>()
        {
            return Err(shape_err(
                self.nodes.len(),
                "reshape",
                format!("cannot reshape {from:?} to {shape:?}"),
            ));
        }
        Ok(self.push(Op::Reshape { x }, shape.to_vec()))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let node = self.nodes.len();
        let Some(&first) = parts.first() else {
            return Err(shape_err(node, "concat", "no operands".into()));
        };
        for &p in parts {
            self.check(p, "concat")?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(
                node,
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    node,
                    "concat",
                    format!("operand shape {s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    fn reduce(&mut self, kind: ReduceKind, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check(x, "reduce")?;
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(
                self.nodes.len(),
                "reduce",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        shape[axis] = 1;
        Ok(self.push(Op::Reduce { kind, x, axis }, shape))
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    /// `log Σ exp(x)` over `axis`, evaluated with the max shifted out.
    pub fn log_sum_exp(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceKind::LogSumExp, x, axis)
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x, "sum_all")?;
        Ok(self.push(Op::SumAll { x }, vec![1]))
    }

    /// `Σ_k t_k (logsumexp(l) - l_k)` over all entries of `logits`, as `[1]`.
    /// Fused so that a nearly saturated softmax keeps its tiny gradient.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        self.check(logits, "softmax_cross_entropy")?;
        self.check(target, "softmax_cross_entropy")?;
        if self.shape(logits) != self.shape(target) {
            return Err(shape_err(
                self.nodes.len(),
                "softmax_cross_entropy",
                format!(
                    "target {:?} differs from logits {:?}",
                    self.shape(target),
                    self.shape(logits)
                ),
            ));
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, target }, vec![1]))
    }

    /// 1-D convolution (cross-correlation) of `x: [C_in, L]` with
    /// `w: [C_out, C_in, K]`, zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.check(x, "conv1d")?;
        self.check(w, "conv1d")?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        let node = self.nodes.len();
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(shape_err(
                node,
                "conv1d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        let geom = Conv1dGeom::new(sx[0], sx[1], sw[2], stride, pad).ok_or_else(|| {
            shape_err(
                node,
                "conv1d",
                format!("kernel {} stride {stride} pad {pad} do not fit length {}", sw[2], sx[1]),
            )
        })?;
        let out_channels = sw[0];
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                geom,
                out_channels,
            },
            vec![out_channels, geom.out_length],
        ))
    }

    /// 2-D convolution of `x: [C_in, H, W]` with `w: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.check(x, "conv2d")?;
        self.check(w, "conv2d")?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        let node = self.nodes.len();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(shape_err(
                node,
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        let geom = Conv2dGeom::new(sx[0], sx[1], sx[2], sw[2], sw[3], stride, pad).ok_or_else(
            || shape_err(node, "conv2d", format!("kernel {sw:?} does not fit input {sx:?}")),
        )?;
        let out_channels = sw[0];
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels,
            },
            vec![out_channels, geom.out_height, geom.out_width],
        ))
    }

    /// Names and shapes of all inputs, in creation order.
    pub fn inputs(&self) -> impl Iterator<Item = (&str, &[usize], bool)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Input {
                name,
                differentiable,
            } => Some((name.as_str(), n.shape.as_slice(), *differentiable)),
            _ => None,
        })
    }
}
