//! Tape-based reverse-mode differentiation over [`FrameMatrix`] values.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order. [`Graph::backward`] walks it in reverse and hands each
//! parent its gradient contribution in declaration order; that fixed order is
//! what makes repeated runs bit-identical.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, FrameMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Working precision of forward values.
///
/// `F32` rounds every primitive's output to single precision; arithmetic
/// inside a primitive still runs in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Temporal convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride-1 convolution with symmetric zero padding that preserves length.
    /// Only odd kernels have a symmetric "same" padding.
    pub fn same(kernel: usize, groups: usize) -> Self {
        debug_assert!(kernel % 2 == 1);
        Self {
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            groups,
        }
    }

    /// Non-overlapping downsampling: kernel = stride = `factor`.
    pub fn downsample(factor: usize) -> Self {
        Self {
            kernel: factor,
            stride: factor,
            padding: 0,
            groups: 1,
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Pooling direction for [`Graph::avg_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Time,
    Channel,
}

/// Maps the upstream gradient and the parents' forward values to one
/// gradient per parent.
pub type BackwardFn = Box<dyn Fn(&FrameMatrix, &[&FrameMatrix]) -> Vec<FrameMatrix>>;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: FrameMatrix,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    MeanPoolTime(NodeId),
    AvgPool {
        input: NodeId,
        kernel: usize,
        axis: Axis,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: FrameMatrix,
    },
    Custom {
        parents: Vec<NodeId>,
        backward: BackwardFn,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::MeanPoolTime(a)
            | Op::Sum(a) => vec![*a],
            Op::AvgPool { input, .. } => vec![*input],
            Op::Conv1d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias);
                p
            }
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { parents, .. } => parents.clone(),
        }
    }
}

struct Node {
    value: FrameMatrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the leaves that requested them.
pub struct Gradients {
    grads: Vec<Option<FrameMatrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&FrameMatrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<FrameMatrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

const GELU_COEF: f64 = 0.044715;

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    let u = (2.0 / PI).sqrt() * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Tanh-approximation GELU on a single value.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &FrameMatrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, mut value: FrameMatrix, op: Op) -> NodeId {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            op => op.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn input(&mut self, value: FrameMatrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: FrameMatrix) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].needs_grad = true;
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!(
                    "[{}x{}] · [{}x{}]",
                    va.rows(),
                    va.cols(),
                    vb.rows(),
                    vb.cols()
                ),
            ));
        }
        let out = matmul_values(va, vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("[{}x{}] vs [{}x{}]", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = FrameMatrix::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[1xC]` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(Error::shape(
                "add_row",
                format!("[{}x{}] + row [{}x{}]", sx.0, sx.1, sr.0, sr.1),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(row).data().to_vec();
        for r in 0..out.rows() {
            axpy(out.row_mut(r), 1.0, &b);
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// `x · w + b` with `w: [in x out]` and `b: [1 x out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let out = self.value(x).map(|v| v * alpha);
        self.push(out, Op::Scale(x, alpha))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Temporal convolution of `x: [L x Cin]`.
    ///
    /// `weight` is `[Cout x (Cin/groups * k)]` with column index `ci * k + j`
    /// (the usual `[Cout][Cin/groups][k]` layout flattened); `bias` is `[1 x Cout]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let (len, cin) = self.shape(x);
        let (cout, wcols) = self.shape(weight);
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::config(
                "groups",
                format!("{g} groups incompatible with {cin} input / {cout} output channels"),
            ));
        }
        let Some(lout) = spec.output_len(len) else {
            return Err(Error::config(
                "kernel",
                format!(
                    "kernel {} longer than padded length {} (stride {})",
                    spec.kernel,
                    len + 2 * spec.padding,
                    spec.stride
                ),
            ));
        };
        let cin_pg = cin / g;
        if wcols != cin_pg * spec.kernel {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "weight [{cout}x{wcols}] does not match {cin_pg} channels per group x kernel {}",
                    spec.kernel
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != (1, cout) {
                let (r, c) = self.shape(b);
                return Err(Error::shape(
                    "conv1d",
                    format!("bias [{r}x{c}] for {cout} output channels"),
                ));
            }
        }
        let out = conv1d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
            lout,
        );
        Ok(self.push(
            out,
            Op::Conv1d {
                input: x,
                weight,
                bias,
                spec,
            },
        ))
    }

    /// Per-row standardization across channels followed by `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != (1, cols) {
                let (r, c) = self.shape(id);
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} [{r}x{c}] for input [{rows}x{cols}]"),
                ));
            }
        }
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut normalized = FrameMatrix::zeros(rows, cols);
        let mut out = FrameMatrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std.push(rstd);
            let nrow = normalized.row_mut(r);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * rstd;
            }
            let nrow = normalized.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = gv[c] * nrow[c] + bv[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Per-channel mean over frames: `[L x C] -> [1 x C]`.
    pub fn mean_pool_time(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = FrameMatrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            axpy(out.data_mut(), 1.0, xv.row(r));
        }
        let inv = 1.0 / xv.rows() as f64;
        for v in out.data_mut() {
            *v *= inv;
        }
        self.push(out, Op::MeanPoolTime(x))
    }

    /// Sliding average with stride 1 and an odd window, zero-free at the
    /// borders: edge outputs average only the in-range neighbours.
    pub fn avg_pool(&mut self, x: NodeId, kernel: usize, axis: Axis) -> Result<NodeId> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::config(
                "pool_kernel",
                format!("pooling window must be odd, got {kernel}"),
            ));
        }
        let out = avg_pool_forward(self.value(x), kernel, axis);
        Ok(self.push(
            out,
            Op::AvgPool {
                input: x,
                kernel,
                axis,
            },
        ))
    }

    /// Sum of all entries as a `[1x1]` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(FrameMatrix::scalar(s), Op::Sum(x))
    }

    /// `-log softmax(logits)[label]` for `logits: [1 x C]`.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        if r != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be one row, got [{r}x{c}]"),
            ));
        }
        if label >= c {
            return Err(Error::Argument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let mut probs = self.value(logits).clone();
        softmax_in_place(probs.row_mut(0));
        Ok(self.push(
            FrameMatrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// An operation with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        parents: &[NodeId],
        value: FrameMatrix,
        backward: BackwardFn,
    ) -> NodeId {
        self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a `[1x1]` node. Only leaves created with
    /// [`Graph::param`] keep their gradient in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::shape(
                "backward",
                format!("loss must be [1x1], got [{r}x{c}]"),
            ));
        }
        let mut grads: Vec<Option<FrameMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(FrameMatrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.node_backward(node, &g) {
                let slot = &mut grads[parent.0];
                debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape());
                match slot {
                    Some(acc) => acc.add_scaled(&pg, 1.0),
                    None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn node_backward(&self, node: &Node, g: &FrameMatrix) -> Vec<(NodeId, FrameMatrix)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, matmul_values(g, &vb.transpose())));
                }
                if self.wants(*b) {
                    out.push((*b, matmul_values(&va.transpose(), g)));
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        out.push((p, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    out.push((*a, hadamard(g, vb)));
                }
                if self.wants(*b) {
                    out.push((*b, hadamard(g, va)));
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*row) {
                    out.push((*row, column_sums(g)));
                }
            }
            Op::Scale(x, alpha) => {
                if self.wants(*x) {
                    out.push((*x, g.map(|v| v * alpha)));
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    out.push((*x, g.transpose()));
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (dx, dw) = conv1d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *spec,
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = dw {
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        out.push((*b, column_sums(g)));
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let cols = g.cols();
                if self.wants(*input) {
                    let mut dx = FrameMatrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let nr = normalized.row(r);
                        let dn: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                        let mean_dn_n =
                            dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    out.push((*input, dx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, column_sums(&hadamard(g, normalized))));
                }
                if self.wants(*beta) {
                    out.push((*beta, column_sums(g)));
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, xi)| gi * gelu_derivative(*xi))
                        .collect();
                    out.push((*x, FrameMatrix::from_vec(g.rows(), g.cols(), data).unwrap()));
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut dx = FrameMatrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - s);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::MeanPoolTime(x) => {
                if self.wants(*x) {
                    let rows = self.shape(*x).0;
                    let inv = 1.0 / rows as f64;
                    let dx = FrameMatrix::from_fn(rows, g.cols(), |_, c| g.get(0, c) * inv);
                    out.push((*x, dx));
                }
            }
            Op::AvgPool {
                input,
                kernel,
                axis,
            } => {
                if self.wants(*input) {
                    out.push((*input, avg_pool_backward(g, *kernel, *axis)));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let (r, c) = self.shape(*x);
                    out.push((*x, FrameMatrix::filled(r, c, g.item())));
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if self.wants(*logits) {
                    let mut d = probs.clone();
                    d.data_mut()[*label] -= 1.0;
                    let scale = g.item();
                    out.push((*logits, d.map(|v| v * scale)));
                }
            }
            Op::Custom { parents, backward } => {
                let vals: Vec<&FrameMatrix> = parents.iter().map(|p| self.value(*p)).collect();
                for (p, pg) in parents.iter().zip(backward(g, &vals)) {
                    if self.wants(*p) {
                        out.push((*p, pg));
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn matmul_values(a: &FrameMatrix, b: &FrameMatrix) -> FrameMatrix {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = FrameMatrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            axpy(orow, av, b.row(p));
        }
    }
    out
}

fn hadamard(a: &FrameMatrix, b: &FrameMatrix) -> FrameMatrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    FrameMatrix::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn column_sums(g: &FrameMatrix) -> FrameMatrix {
    let mut out = FrameMatrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        axpy(out.data_mut(), 1.0, g.row(r));
    }
    out
}

/// Repack `[Cout][Cin/g][k]` into `[Cout][k][Cin/g]` so the channel loop is contiguous.
fn pack_kernel(weight: &FrameMatrix, cin_pg: usize, k: usize) -> Vec<f64> {
    let cout = weight.rows();
    let mut packed = vec![0.0; cout * k * cin_pg];
    for o in 0..cout {
        let w = weight.row(o);
        for ci in 0..cin_pg {
            for j in 0..k {
                packed[(o * k + j) * cin_pg + ci] = w[ci * k + j];
            }
        }
    }
    packed
}

fn unpack_kernel(packed: &[f64], cout: usize, cin_pg: usize, k: usize) -> FrameMatrix {
    let mut w = FrameMatrix::zeros(cout, cin_pg * k);
    for o in 0..cout {
        for j in 0..k {
            for ci in 0..cin_pg {
                w.set(o, ci * k + j, packed[(o * k + j) * cin_pg + ci]);
            }
        }
    }
    w
}

/// Source frame for output `t` and tap `j`, if it falls inside the input.
#[inline]
fn source_frame(t: usize, j: usize, spec: ConvSpec, len: usize) -> Option<usize> {
    (t * spec.stride + j)
        .checked_sub(spec.padding)
        .filter(|&r| r < len)
}

fn conv1d_forward(
    x: &FrameMatrix,
    weight: &FrameMatrix,
    bias: Option<&FrameMatrix>,
    spec: ConvSpec,
    lout: usize,
) -> FrameMatrix {
    let (len, cin) = x.shape();
    let cout = weight.rows();
    let k = spec.kernel;
    let cin_pg = cin / spec.groups;
    let cout_pg = cout / spec.groups;
    let packed = pack_kernel(weight, cin_pg, k);
    let mut out = FrameMatrix::zeros(lout, cout);
    for t in 0..lout {
        for o in 0..cout {
            let c0 = (o / cout_pg) * cin_pg;
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for j in 0..k {
                if let Some(r) = source_frame(t, j, spec, len) {
                    let w = &packed[(o * k + j) * cin_pg..(o * k + j + 1) * cin_pg];
                    acc += dot(&x.row(r)[c0..c0 + cin_pg], w);
                }
            }
            out.set(t, o, acc);
        }
    }
    out
}

fn conv1d_backward(
    x: &FrameMatrix,
    weight: &FrameMatrix,
    g: &FrameMatrix,
    spec: ConvSpec,
    want_x: bool,
    want_w: bool,
) -> (Option<FrameMatrix>, Option<FrameMatrix>) {
    let (len, cin) = x.shape();
    let (lout, cout) = g.shape();
    let k = spec.kernel;
    let cin_pg = cin / spec.groups;
    let cout_pg = cout / spec.groups;
    let packed = pack_kernel(weight, cin_pg, k);
    let mut dx = want_x.then(|| FrameMatrix::zeros(len, cin));
    let mut dpacked = want_w.then(|| vec![0.0; packed.len()]);
    for t in 0..lout {
        for o in 0..cout {
            let go = g.get(t, o);
            let c0 = (o / cout_pg) * cin_pg;
            for j in 0..k {
                let Some(r) = source_frame(t, j, spec, len) else {
                    continue;
                };
                let span = (o * k + j) * cin_pg..(o * k + j + 1) * cin_pg;
                if let Some(dx) = dx.as_mut() {
                    axpy(&mut dx.row_mut(r)[c0..c0 + cin_pg], go, &packed[span.clone()]);
                }
                if let Some(dp) = dpacked.as_mut() {
                    axpy(&mut dp[span], go, &x.row(r)[c0..c0 + cin_pg]);
                }
            }
        }
    }
    let dw = dpacked.map(|p| unpack_kernel(&p, cout, cin_pg, k));
    (dx, dw)
}

fn pool_window(i: usize, half: usize, n: usize) -> std::ops::Range<usize> {
    i.saturating_sub(half)..(i + half + 1).min(n)
}

fn avg_pool_forward(x: &FrameMatrix, kernel: usize, axis: Axis) -> FrameMatrix {
    let (rows, cols) = x.shape();
    let half = kernel / 2;
    match axis {
        Axis::Time => FrameMatrix::from_fn(rows, cols, |r, c| {
            let w = pool_window(r, half, rows);
            let n = w.len() as f64;
            w.map(|s| x.get(s, c)).sum::<f64>() / n
        }),
        Axis::Channel => FrameMatrix::from_fn(rows, cols, |r, c| {
            let w = pool_window(c, half, cols);
            let n = w.len() as f64;
            w.map(|s| x.get(r, s)).sum::<f64>() / n
        }),
    }
}

fn avg_pool_backward(g: &FrameMatrix, kernel: usize, axis: Axis) -> FrameMatrix {
    let (rows, cols) = g.shape();
    let half = kernel / 2;
    let mut dx = FrameMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let gv = g.get(r, c);
            match axis {
                Axis::Time => {
                    let w = pool_window(r, half, rows);
                    let share = gv / w.len() as f64;
                    for s in w {
                        dx.data_mut()[s * cols + c] += share;
                    }
                }
                Axis::Channel => {
                    let w = pool_window(c, half, cols);
                    let share = gv / w.len() as f64;
                    for s in w {
                        dx.data_mut()[r * cols + s] += share;
                    }
                }
            }
        }
    }
    dx
}
