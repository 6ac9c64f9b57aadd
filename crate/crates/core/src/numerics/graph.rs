//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Graph`] records every primitive as it is applied, so node ids are
//! already a topological order: inputs always carry smaller ids than the
//! nodes that consume them. [`Graph::backward`] walks the ids in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] map.
//!
//! Binary elementwise primitives broadcast over rank-2 operands whose
//! dimensions are either equal or 1, which covers scalar-with-matrix,
//! bias-row-with-matrix and per-row weights.

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied to predictions inside the binary cross-entropy primitive.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Parameter or constant input.
    Leaf,
    MatMul,
    Add,
    Mul,
    /// Column-wise concatenation of matrices with equal row counts.
    Concat,
    SliceCols { start: usize, end: usize },
    Relu,
    Sigmoid,
    /// Softmax over each row.
    Softmax,
    Scale(f64),
    /// Sum of each row, producing a column.
    SumRows,
    /// Identity forward, zero derivative backward.
    StopGradient,
    /// Mean binary cross-entropy of the input against fixed labels.
    Bce { labels: Array },
    /// Mean of all elements.
    Mean,
    /// Row lookup into a table input.
    Gather { indices: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Scale(_) => "scale",
            Op::SumRows => "sum_rows",
            Op::StopGradient => "stop_gradient",
            Op::Bce { .. } => "bce",
            Op::Mean => "mean",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Array,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
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

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Registers an input value (parameter or constant).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            op,
            inputs,
            value,
        });
        id
    }

    /// Evaluates `op` on `inputs` and registers the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!(
                "{} refers to unknown node {}",
                op.name(),
                bad.0
            )));
        }
        let values: Vec<&Array> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&op, &values)?;
        Ok(self.push(op, inputs.to_vec(), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat, parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::SliceCols { start, end }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale(factor), &[a])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::SumRows, &[a])
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::StopGradient, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[a])
    }

    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Gather { indices }, &[table])
    }

    /// Mean binary cross-entropy between `prediction` and binary `labels`.
    ///
    /// Predictions are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]`; the
    /// derivative is evaluated at the clamped value.
    pub fn bce(&mut self, prediction: NodeId, labels: Array) -> Result<NodeId> {
        if let Some(bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Validation(format!(
                "bce label {bad} is not in {{0, 1}}"
            )));
        }
        self.apply(Op::Bce { labels }, &[prediction])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("unknown loss node {}", loss.0)))?;
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.inputs.is_empty() {
                let inputs: Vec<&Array> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let contributions = vjp(&node.op, &inputs, &node.value, &upstream)?;
                for (input, contribution) in node.inputs.iter().zip(contributions) {
                    let Some(contribution) = contribution else {
                        continue;
                    };
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&contribution),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[idx] = Some(upstream);
        }
        for g in grads.iter().flatten() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`]: total derivative of the loss with respect
/// to every node that reaches it.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of `id`, or `None` when the node does not reach the loss.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zero-filled when the node does not reach the loss.
    pub fn get_or_zeros(&self, id: NodeId, graph: &Graph) -> Array {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(graph.value(id).shape()))
    }
}

fn broadcast_dims(op: &'static str, a: &Array, b: &Array) -> Result<(usize, usize)> {
    let (ra, ca) = a.dims2(op)?;
    let (rb, cb) = b.dims2(op)?;
    let join = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (join(ra, rb), join(ca, cb)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )),
    }
}

#[inline]
fn bidx(a: &Array, i: usize, j: usize) -> usize {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn binary(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    let (rows, cols) = broadcast_dims(op, a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(rows * cols);
    if a.shape() == b.shape() {
        out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    } else {
        for i in 0..rows {
            for j in 0..cols {
                out.push(f(ad[bidx(a, i, j)], bd[bidx(b, i, j)]));
            }
        }
    }
    Array::computed(op, vec![rows, cols], out)
}

/// Sums a broadcast gradient back down to `target`'s shape.
fn reduce_to(grad: Vec<f64>, rows: usize, cols: usize, target: &Array) -> Array {
    if target.shape() == [rows, cols] {
        return Array::computed("reduce", vec![rows, cols], grad).expect("finite gradient");
    }
    let mut out = Array::zeros(target.shape());
    let data = out.data_mut();
    for i in 0..rows {
        for j in 0..cols {
            data[bidx(target, i, j)] += grad[i * cols + j];
        }
    }
    out
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // SAFETY: strides describe in-bounds m x k and k x n views of `a` and
    // `b`; `c` is a dense m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn expect_inputs(op: &Op, inputs: &[&Array], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Contract(format!(
            "{} takes {n} input(s), got {}",
            op.name(),
            inputs.len()
        )));
    }
    Ok(())
}

fn forward(op: &Op, inputs: &[&Array]) -> Result<Array> {
    let name = op.name();
    match op {
        Op::Leaf => Err(Error::Contract("leaf nodes are created with Graph::leaf".into())),
        Op::MatMul => {
            expect_inputs(op, inputs, 2)?;
            let (m, k) = inputs[0].dims2(name)?;
            let (k2, n) = inputs[1].dims2(name)?;
            if k != k2 {
                return Err(Error::shape(
                    name,
                    format!(
                        "inner dimensions differ: {:?} x {:?}",
                        inputs[0].shape(),
                        inputs[1].shape()
                    ),
                ));
            }
            let c = gemm(m, k, n, inputs[0].data(), (k, 1), inputs[1].data(), (n, 1));
            Array::computed(name, vec![m, n], c)
        }
        Op::Add => {
            expect_inputs(op, inputs, 2)?;
            binary(name, inputs[0], inputs[1], |x, y| x + y)
        }
        Op::Mul => {
            expect_inputs(op, inputs, 2)?;
            binary(name, inputs[0], inputs[1], |x, y| x * y)
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(Error::Contract("concat needs at least one input".into()));
            }
            let rows = inputs[0].dims2(name)?.0;
            let mut widths = Vec::with_capacity(inputs.len());
            for a in inputs {
                let (r, c) = a.dims2(name)?;
                if r != rows {
                    let shapes: Vec<_> = inputs.iter().map(|a| a.shape().to_vec()).collect();
                    return Err(Error::shape(name, format!("row counts differ: {shapes:?}")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (a, &w) in inputs.iter().zip(&widths) {
                    out.extend_from_slice(&a.data()[i * w..(i + 1) * w]);
                }
            }
            Array::computed(name, vec![rows, total], out)
        }
        Op::SliceCols { start, end } => {
            expect_inputs(op, inputs, 1)?;
            let (rows, cols) = inputs[0].dims2(name)?;
            if start >= end || *end > cols {
                return Err(Error::shape(
                    name,
                    format!("columns {start}..{end} out of range for {:?}", inputs[0].shape()),
                ));
            }
            let d = inputs[0].data();
            let mut out = Vec::with_capacity(rows * (end - start));
            for i in 0..rows {
                out.extend_from_slice(&d[i * cols + start..i * cols + end]);
            }
            Array::computed(name, vec![rows, end - start], out)
        }
        Op::Relu => {
            expect_inputs(op, inputs, 1)?;
            let mut out = inputs[0].clone();
            out.map_inplace(|x| x.max(0.0));
            Ok(out)
        }
        Op::Sigmoid => {
            expect_inputs(op, inputs, 1)?;
            let mut out = inputs[0].clone();
            out.map_inplace(sigmoid);
            Ok(out)
        }
        Op::Softmax => {
            expect_inputs(op, inputs, 1)?;
            let (rows, cols) = inputs[0].dims2(name)?;
            let mut out = inputs[0].clone();
            for row in out.data_mut().chunks_mut(cols).take(rows) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Ok(out)
        }
        Op::Scale(factor) => {
            expect_inputs(op, inputs, 1)?;
            let data = inputs[0].data().iter().map(|x| x * factor).collect();
            Array::computed(name, inputs[0].shape().to_vec(), data)
        }
        Op::SumRows => {
            expect_inputs(op, inputs, 1)?;
            let (rows, cols) = inputs[0].dims2(name)?;
            let data = inputs[0].data().chunks(cols).map(|r| r.iter().sum()).collect();
            Array::computed(name, vec![rows, 1], data)
        }
        Op::StopGradient => {
            expect_inputs(op, inputs, 1)?;
            Ok(inputs[0].clone())
        }
        Op::Bce { labels } => {
            expect_inputs(op, inputs, 1)?;
            let p = inputs[0];
            if p.shape() != labels.shape() {
                return Err(Error::shape(
                    name,
                    format!("prediction {:?} vs labels {:?}", p.shape(), labels.shape()),
                ));
            }
            let total: f64 = p
                .data()
                .iter()
                .zip(labels.data())
                .map(|(&p, &y)| {
                    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum();
            Array::computed(name, vec![1, 1], vec![total / p.len() as f64])
        }
        Op::Mean => {
            expect_inputs(op, inputs, 1)?;
            let a = inputs[0];
            let total: f64 = a.data().iter().sum();
            Array::computed(name, vec![1, 1], vec![total / a.len() as f64])
        }
        Op::Gather { indices } => {
            expect_inputs(op, inputs, 1)?;
            let (vocab, dim) = inputs[0].dims2(name)?;
            if indices.is_empty() {
                return Err(Error::shape(name, "empty index list"));
            }
            let d = inputs[0].data();
            let mut out = Vec::with_capacity(indices.len() * dim);
            for &ix in indices {
                if ix >= vocab {
                    return Err(Error::shape(
                        name,
                        format!("index {ix} out of range for table of {vocab} rows"),
                    ));
                }
                out.extend_from_slice(&d[ix * dim..(ix + 1) * dim]);
            }
            Array::computed(name, vec![indices.len(), dim], out)
        }
    }
}

/// Vector-Jacobian products of `op` for each input; `None` means no
/// contribution.
fn vjp(op: &Op, inputs: &[&Array], out: &Array, g: &Array) -> Result<Vec<Option<Array>>> {
    let name = op.name();
    let grads = match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2(name)?;
            let n = b.shape()[1];
            // dA = G B^T, dB = A^T G
            let da = gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n));
            let db = gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1));
            vec![
                Some(Array::computed(name, vec![m, k], da)?),
                Some(Array::computed(name, vec![k, n], db)?),
            ]
        }
        Op::Add => {
            let (rows, cols) = (g.shape()[0], g.shape()[1]);
            vec![
                Some(reduce_to(g.data().to_vec(), rows, cols, inputs[0])),
                Some(reduce_to(g.data().to_vec(), rows, cols, inputs[1])),
            ]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (rows, cols) = (g.shape()[0], g.shape()[1]);
            let gd = g.data();
            let mut ga = Vec::with_capacity(rows * cols);
            let mut gb = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    let gij = gd[i * cols + j];
                    ga.push(gij * b.data()[bidx(b, i, j)]);
                    gb.push(gij * a.data()[bidx(a, i, j)]);
                }
            }
            vec![
                Some(reduce_to(ga, rows, cols, a)),
                Some(reduce_to(gb, rows, cols, b)),
            ]
        }
        Op::Concat => {
            let rows = g.shape()[0];
            let total = g.shape()[1];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for a in inputs {
                let w = a.shape()[1];
                let mut part = Vec::with_capacity(rows * w);
                for i in 0..rows {
                    part.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                offset += w;
                grads.push(Some(Array::computed(name, vec![rows, w], part)?));
            }
            grads
        }
        Op::SliceCols { start, end } => {
            let mut ga = Array::zeros(inputs[0].shape());
            let cols = inputs[0].shape()[1];
            let w = end - start;
            let gd = g.data();
            for (i, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                row[*start..*end].copy_from_slice(&gd[i * w..(i + 1) * w]);
            }
            vec![Some(ga)]
        }
        Op::Relu => {
            let data = inputs[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                .collect();
            vec![Some(Array::computed(name, out.shape().to_vec(), data)?)]
        }
        Op::Sigmoid => {
            let data = out
                .data()
                .iter()
                .zip(g.data())
                .map(|(&s, &gi)| gi * s * (1.0 - s))
                .collect();
            vec![Some(Array::computed(name, out.shape().to_vec(), data)?)]
        }
        Op::Softmax => {
            let cols = out.shape()[1];
            let mut data = Vec::with_capacity(out.len());
            for (y, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                data.extend(y.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            vec![Some(Array::computed(name, out.shape().to_vec(), data)?)]
        }
        Op::Scale(factor) => {
            let data = g.data().iter().map(|x| x * factor).collect();
            vec![Some(Array::computed(name, g.shape().to_vec(), data)?)]
        }
        Op::SumRows => {
            let cols = inputs[0].shape()[1];
            let data = g
                .data()
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi, cols))
                .collect();
            vec![Some(Array::computed(name, inputs[0].shape().to_vec(), data)?)]
        }
        Op::StopGradient => vec![None],
        Op::Bce { labels } => {
            let p = inputs[0];
            let scale = g.data()[0] / p.len() as f64;
            let data = p
                .data()
                .iter()
                .zip(labels.data())
                .map(|(&p, &y)| {
                    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                    scale * (p - y) / (p * (1.0 - p))
                })
                .collect();
            vec![Some(Array::computed(name, p.shape().to_vec(), data)?)]
        }
        Op::Mean => {
            let a = inputs[0];
            vec![Some(Array::full(a.shape(), g.data()[0] / a.len() as f64))]
        }
        Op::Gather { indices } => {
            let mut table = Array::zeros(inputs[0].shape());
            let dim = inputs[0].shape()[1];
            let td = table.data_mut();
            for (row, &ix) in g.data().chunks(dim).zip(indices) {
                for (t, v) in td[ix * dim..(ix + 1) * dim].iter_mut().zip(row) {
                    *t += v;
                }
            }
            vec![Some(table)]
        }
    };
    Ok(grads)
}
