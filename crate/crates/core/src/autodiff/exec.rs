use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::graph::{BinaryKind, Broadcast, Graph, NodeId, Op, ReduceKind, UnaryKind, ARCCOS_EPS};
use super::kernels::{col2im_1d, col2im_2d, gemm, im2col_1d, im2col_2d, softmax_xent};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named tensors bound to graph inputs for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: &'a Tensor) -> Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: &'a Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// Gradients of a scalar output w.r.t. every differentiable input, by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Forward values of every node, retained for a later backward pass.
pub struct Evaluation<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
}

impl Graph {
    /// Evaluate every node in order.
    pub fn forward<'a>(&'a self, inputs: &Bindings<'a>) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (index, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name, .. } => {
                    let bound = inputs
                        .get(name)
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: index,
                            op: "input",
                            detail: format!(
                                "`{name}` bound with shape {:?}, declared {:?}",
                                bound.shape(),
                                node.shape
                            ),
                        });
                    }
                    Cow::Borrowed(bound)
                }
                Op::Constant(t) => Cow::Borrowed(t),
                op => Cow::Owned(forward_op(op, &node.shape, &values)),
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: index,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        Ok(Evaluation {
            graph: self,
            values,
        })
    }

    /// Value of the scalar `output` and its gradient w.r.t. every input
    /// declared differentiable.
    pub fn evaluate_with_gradients(
        &self,
        inputs: &Bindings<'_>,
        output: NodeId,
    ) -> Result<(Tensor, Gradients)> {
        let shape = self.shape(output);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: shape.to_vec(),
            });
        }
        let seed = Tensor::ones(shape);
        let eval = self.forward(inputs)?;
        let grads = eval.backward(output, &seed)?;
        Ok((eval.value(output).clone(), grads))
    }

    /// Value of `output` without gradients.
    pub fn evaluate(&self, inputs: &Bindings<'_>, output: NodeId) -> Result<Tensor> {
        Ok(self.forward(inputs)?.value(output).clone())
    }
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref()
    }

    /// Reverse accumulation of `seed · ∂output/∂input` for every
    /// differentiable input. `seed` must have the output's shape.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        let nodes = &self.graph.nodes;
        if seed.shape() != nodes[output.0].shape.as_slice() {
            return Err(Error::Shape {
                node: output.0,
                op: "backward",
                detail: format!(
                    "seed shape {:?} differs from output shape {:?}",
                    seed.shape(),
                    nodes[output.0].shape
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }
        let mut result = Gradients::default();
        for index in (0..=output.0).rev() {
            let node = &nodes[index];
            if let Op::Input {
                name,
                differentiable: true,
            } = &node.op
            {
                let g = grads[index]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&node.shape));
                result.map.insert(name.clone(), g);
                continue;
            }
            let Some(g) = grads[index].take() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            self.backward_op(&node.op, index, &g, &mut grads);
        }
        for (name, shape, differentiable) in self.graph.inputs() {
            if differentiable && !result.map.contains_key(name) {
                result.map.insert(name.to_string(), Tensor::zeros(shape));
            }
        }
        Ok(result)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.graph.nodes[id.0].requires_grad
    }

    fn backward_op(&self, op: &Op, index: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| -> &Tensor { self.values[id.0].as_ref() };
        let out = self.values[index].as_ref();
        let mut push = |id: NodeId, t: Tensor| accumulate(grads, id, t);
        match op {
            Op::Input { .. } | Op::Constant(_) => {}
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            } => {
                let (a, b) = (val(*lhs), val(*rhs));
                let cols = a.shape().last().copied().unwrap_or(1);
                let bi = |i: usize| broadcast_index(*broadcast, i, cols);
                let gd = g.data();
                if self.needs(*lhs) {
                    let da: Vec<f64> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                        BinaryKind::Mul => {
                            gd.iter().enumerate().map(|(i, &gi)| gi * b.data()[bi(i)]).collect()
                        }
                        BinaryKind::Div => {
                            gd.iter().enumerate().map(|(i, &gi)| gi / b.data()[bi(i)]).collect()
                        }
                    };
                    push(*lhs, Tensor::from_parts(a.shape().to_vec(), da));
                }
                if self.needs(*rhs) {
                    let mut db = vec![0.0; b.numel()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let j = bi(i);
                        db[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * a.data()[i],
                            BinaryKind::Div => {
                                let bj = b.data()[j];
                                -gi * a.data()[i] / (bj * bj)
                            }
                        };
                    }
                    push(*rhs, Tensor::from_parts(b.shape().to_vec(), db));
                }
            }
            Op::Affine { x, scale, .. } => {
                push(*x, g.map(|v| v * scale));
            }
            Op::Unary { kind, x } => {
                let xv = val(*x);
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(out.data())
                    .map(|((&gi, &xi), &yi)| match kind {
                        UnaryKind::Exp => gi * yi,
                        UnaryKind::Log => gi / xi,
                        UnaryKind::Sqrt => gi / (2.0 * yi),
                        UnaryKind::Sigmoid => gi * yi * (1.0 - yi),
                        UnaryKind::Arccos => {
                            if xi < -1.0 + ARCCOS_EPS || xi > 1.0 - ARCCOS_EPS {
                                0.0
                            } else {
                                -gi / (1.0 - xi * xi).sqrt()
                            }
                        }
                    })
                    .collect();
                push(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { 0.0 })
                    .collect();
                push(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { gi * slope })
                    .collect();
                push(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    push(*a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    push(*b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Reshape { x } => {
                let shape = val(*x).shape().to_vec();
                push(*x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Concat { parts, axis } => {
                let shape = &self.graph.nodes[index].shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let block = ps[*axis] * inner;
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total + offset;
                            data.extend_from_slice(&g.data()[start..start + block]);
                        }
                        push(p, Tensor::from_parts(ps, data));
                    }
                    offset += block;
                }
            }
            Op::Reduce { kind, x, axis } => {
                let xv = val(*x);
                let (outer, n, inner) = split_axis(xv.shape(), *axis);
                let mut data = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g.data()[o * inner + i];
                        let at = |k: usize| (o * n + k) * inner + i;
                        match kind {
                            ReduceKind::Sum => (0..n).for_each(|k| data[at(k)] = gi),
                            ReduceKind::Mean => (0..n).for_each(|k| data[at(k)] = gi / n as f64),
                            ReduceKind::Max => {
                                let mut best = 0;
                                for k in 1..n {
                                    if xv.data()[at(k)] > xv.data()[at(best)] {
                                        best = k;
                                    }
                                }
                                data[at(best)] = gi;
                            }
                            ReduceKind::LogSumExp => {
                                let y = out.data()[o * inner + i];
                                for k in 0..n {
                                    data[at(k)] = gi * (xv.data()[at(k)] - y).exp();
                                }
                            }
                        }
                    }
                }
                push(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::SumAll { x } => {
                let xv = val(*x);
                push(*x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let (lv, tv) = (val(*logits), val(*target));
                let x = softmax_xent(lv.data(), tv.data());
                let gi = g.data()[0];
                if self.needs(*logits) {
                    let d = x.d_logits.iter().map(|v| v * gi).collect();
                    push(*logits, Tensor::from_parts(lv.shape().to_vec(), d));
                }
                if self.needs(*target) {
                    let d = x.d_target.iter().map(|v| v * gi).collect();
                    push(*target, Tensor::from_parts(tv.shape().to_vec(), d));
                }
            }
            Op::Conv1d {
                x,
                w,
                geom,
                out_channels,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, cols_n) = (geom.rows(), geom.out_length);
                if self.needs(*w) {
                    let cols = im2col_1d(xv.data(), geom);
                    let mut dw = vec![0.0; out_channels * rows];
                    gemm(*out_channels, cols_n, rows, g.data(), false, &cols, true, &mut dw, false);
                    push(*w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * cols_n];
                    gemm(rows, *out_channels, cols_n, wv.data(), true, g.data(), false, &mut dcols, false);
                    push(*x, Tensor::from_parts(xv.shape().to_vec(), col2im_1d(&dcols, geom)));
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, p) = (geom.rows(), geom.positions());
                if self.needs(*w) {
                    let cols = im2col_2d(xv.data(), geom);
                    let mut dw = vec![0.0; out_channels * rows];
                    gemm(*out_channels, p, rows, g.data(), false, &cols, true, &mut dw, false);
                    push(*w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * p];
                    gemm(rows, *out_channels, p, wv.data(), true, g.data(), false, &mut dcols, false);
                    push(*x, Tensor::from_parts(xv.shape().to_vec(), col2im_2d(&dcols, geom)));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn broadcast_index(b: Broadcast, i: usize, cols: usize) -> usize {
    match b {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Column => i / cols,
        Broadcast::Row => i % cols,
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward_op(op: &Op, shape: &[usize], values: &[Cow<'_, Tensor>]) -> Tensor {
    let operand = |id: &NodeId| -> &Tensor { values[id.0].as_ref() };
    let elementwise = |x: &Tensor, f: &dyn Fn(f64) -> f64| x.map(f);
    match op {
        Op::Input { .. } | Op::Constant(_) => unreachable!("leaf nodes are bound, not computed"),
        Op::Binary {
            kind,
            lhs,
            rhs,
            broadcast,
        } => {
            let (a, b) = (operand(lhs), operand(rhs));
            let cols = a.shape().last().copied().unwrap_or(1);
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &ai)| {
                    let bi = bd[broadcast_index(*broadcast, i, cols)];
                    match kind {
                        BinaryKind::Add => ai + bi,
                        BinaryKind::Sub => ai - bi,
                        BinaryKind::Mul => ai * bi,
                        BinaryKind::Div => ai / bi,
                    }
                })
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::Affine { x, scale, shift } => elementwise(operand(x), &|v| scale * v + shift),
        Op::Unary { kind, x } => {
            let f: fn(f64) -> f64 = match kind {
                UnaryKind::Exp => f64::exp,
                UnaryKind::Log => f64::ln,
                UnaryKind::Sqrt => f64::sqrt,
                UnaryKind::Sigmoid => sigmoid,
                UnaryKind::Arccos => |v: f64| v.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS).acos(),
            };
            elementwise(operand(x), &f)
        }
        Op::Clamp { x, lo, hi } => elementwise(operand(x), &|v| v.clamp(*lo, *hi)),
        Op::LeakyRelu { x, slope } => {
            elementwise(operand(x), &|v| if v > 0.0 { v } else { v * slope })
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (operand(a), operand(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, av.data(), false, bv.data(), false, &mut c, false);
            Tensor::from_parts(shape.to_vec(), c)
        }
        Op::Reshape { x } => Tensor::from_parts(shape.to_vec(), operand(x).data().to_vec()),
        Op::Concat { parts, axis } => {
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let pv = operand(p);
                    let block = pv.shape()[*axis] * inner;
                    data.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::Reduce { kind, x, axis } => {
            let xv = operand(x);
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let column = (0..n).map(|k| xv.data()[(o * n + k) * inner + i]);
                    data[o * inner + i] = match kind {
                        ReduceKind::Sum => column.sum(),
                        ReduceKind::Mean => column.sum::<f64>() / n as f64,
                        ReduceKind::Max => column.fold(f64::NEG_INFINITY, f64::max),
                        ReduceKind::LogSumExp => {
                            let m = column.clone().fold(f64::NEG_INFINITY, f64::max);
                            m + column.map(|v| (v - m).exp()).sum::<f64>().ln()
                        }
                    };
                }
            }
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::SumAll { x } => Tensor::scalar(operand(x).sum()),
        Op::SoftmaxCrossEntropy { logits, target } => {
            Tensor::scalar(softmax_xent(operand(logits).data(), operand(target).data()).loss)
        }
        Op::Conv1d {
            x,
            w,
            geom,
            out_channels,
        } => {
            let cols = im2col_1d(operand(x).data(), geom);
            let mut out = vec![0.0; out_channels * geom.out_length];
            gemm(*out_channels, geom.rows(), geom.out_length, operand(w).data(), false, &cols, false, &mut out, false);
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Conv2d {
            x,
            w,
            geom,
            out_channels,
        } => {
            let cols = im2col_2d(operand(x).data(), geom);
            let mut out = vec![0.0; out_channels * geom.positions()];
            gemm(*out_channels, geom.rows(), geom.positions(), operand(w).data(), false, &cols, false, &mut out, false);
            Tensor::from_parts(shape.to_vec(), out)
        }
    }
}
