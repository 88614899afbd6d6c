use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Names of the recorded primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale,
    Exp,
    Log,
    Gelu,
    Softplus,
    Sum,
    Mean,
    MatMul,
    Transpose,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Reshape,
    GatherRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
    Splat,
    NormalizeRows,
    PickPerRow,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::Scale,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Gelu,
        OpKind::Softplus,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Reshape,
        OpKind::GatherRows,
        OpKind::SliceCols,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::Splat,
        OpKind::NormalizeRows,
        OpKind::PickPerRow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::Scale => "scale",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Gelu => "gelu",
            OpKind::Softplus => "softplus",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Reshape => "reshape",
            OpKind::GatherRows => "gather_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Splat => "splat",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::PickPerRow => "pick_per_row",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op `{s}`")))
    }
}

enum Op {
    Leaf,
    Binary(OpKind, Var, Var),
    Unary(OpKind, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Splat {
        feat: Var,
        weights: Var,
        targets: Vec<Option<usize>>,
    },
    PickPerRow {
        x: Var,
        cols: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(k, ..) | Op::Unary(k, _) => *k,
            Op::Scale(..) => OpKind::Scale,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Splat { .. } => OpKind::Splat,
            Op::PickPerRow { .. } => OpKind::PickPerRow,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::LayerNorm { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PickPerRow { x, .. } => vec![*x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::Splat { feat, weights, .. } => vec![*feat, *weights],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape: an append-only list of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` has its sign flipped. Used to
    /// confirm that the gradient checker notices a broken rule.
    pub fn with_fault(kind: Option<OpKind>) -> Self {
        Self {
            fault: kind,
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<OpKind> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_with(value, Op::Leaf, false)
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

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(kind.name(), ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(OpKind::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(OpKind::Mul, a, b, |x, y| x * y)
    }

    fn zip_row(
        &mut self,
        kind: OpKind,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let d = ta.last_dim();
        if tr.numel() != d {
            return Err(Error::shape(kind.name(), ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, r[i % d]))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Binary(kind, a, row)))
    }

    /// Adds a length-`d` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.zip_row(OpKind::AddRow, a, row, |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a length-`d` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.zip_row(OpKind::MulRow, a, row, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        self.push(out, Op::Scale(a, s))
    }

    fn map_unary(&mut self, kind: OpKind, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("same shape");
        self.push(out, Op::Unary(kind, a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(OpKind::Exp, a, f64::exp)
    }

    /// Natural log; every input element must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map_unary(OpKind::Log, a, f64::ln))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(OpKind::Gelu, a, gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_unary(OpKind::Softplus, a, softplus)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Unary(OpKind::Sum, a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Unary(OpKind::Mean, a))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) =
            dims2(ta, "matmul").map_err(|_| Error::shape("matmul", ta.shape(), tb.shape()))?;
        let (k2, n) =
            dims2(tb, "matmul").map_err(|_| Error::shape("matmul", ta.shape(), tb.shape()))?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::Binary(OpKind::MatMul, a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = dims2(t, "transpose")?;
        let out = Tensor::new(vec![n, m], transpose_raw(t.data(), m, n))?;
        Ok(self.push(out, Op::Unary(OpKind::Transpose, a)))
    }

    // ---- last-axis normalizations --------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Unary(OpKind::Softmax, a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Unary(OpKind::LogSoftmax, a))
    }

    /// `(x - mean) / sqrt(var + eps)` over the last axis with biased variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Domain {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let t = self.value(a);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { x: a, inv_std }))
    }

    /// Rows scaled to unit L2 norm, `x / sqrt(|x|^2 + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(d) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::NormalizeRows { x: a, norms })
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Unary(OpKind::Reshape, a)))
    }

    /// Selects rows (of the `[rows, last_dim]` view) by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = (t.rows(), t.last_dim());
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape("gather_rows", t.shape(), &[i]));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = dims2(t, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        Ok(self.push(out, Op::SliceCols { x: a, start }))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let n = dims2(self.value(*first), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            let (m, c) = dims2(t, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(*first), t.shape()));
            }
            rows += m;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = dims2(self.value(*first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (r, c) = dims2(t, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(*first), t.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// `out[i] = x[i, cols[i]]` for a 2-D `x`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = dims2(t, "pick_per_row")?;
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::shape("pick_per_row", t.shape(), &[cols.len()]));
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| t.data()[i * n + c])
            .collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(
            out,
            Op::PickPerRow {
                x: a,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Weighted scatter-add: row `p` of `feat` ([P, C]) is added into output
    /// row `targets[p * D + b]` with weight `weights[p, b]` ([P, D]).
    /// `None` targets are dropped.
    pub fn splat(
        &mut self,
        feat: Var,
        weights: Var,
        targets: &[Option<usize>],
        out_rows: usize,
    ) -> Result<Var> {
        let (tf, tw) = (self.value(feat), self.value(weights));
        let (p, c) = dims2(tf, "splat")?;
        let (p2, d) = dims2(tw, "splat")?;
        if p != p2 || targets.len() != p * d {
            return Err(Error::shape("splat", tf.shape(), tw.shape()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= out_rows) {
            return Err(Error::shape("splat", &[out_rows], &[*bad]));
        }
        let mut data = vec![0.0; out_rows * c];
        for i in 0..p {
            let f = &tf.data()[i * c..(i + 1) * c];
            for b in 0..d {
                if let Some(t) = targets[i * d + b] {
                    let w = tw.data()[i * d + b];
                    for (o, fv) in data[t * c..(t + 1) * c].iter_mut().zip(f) {
                        *o += w * fv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![out_rows, c], data)?;
        Ok(self.push(
            out,
            Op::Splat {
                feat,
                weights,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar node, filling gradients of every
    /// `requires_grad` ancestor. Contributions from multiple paths add.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(loss, &Tensor::scalar(1.0))
    }

    /// Reverse sweep from `out` with upstream gradient `seed` (same element
    /// count as `out`), i.e. the gradient of `sum(seed ⊙ out)`.
    pub fn backward_from(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        let loss = out;
        if seed.numel() != self.value(out).numel() {
            return Err(Error::shape("backward_from", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(seed.data().to_vec());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let sign = if self.fault == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            for (input, mut contrib) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if sign < 0.0 {
                    contrib.iter_mut().for_each(|v| *v = -*v);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(a), val(b));
                match kind {
                    OpKind::Add => vec![(*a, g.to_vec()), (*b, g.to_vec())],
                    OpKind::Sub => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
                    OpKind::Mul => vec![
                        (*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect()),
                        (*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect()),
                    ],
                    OpKind::AddRow => {
                        let d = tb.numel();
                        let mut gb = vec![0.0; d];
                        for (k, gv) in g.iter().enumerate() {
                            gb[k % d] += gv;
                        }
                        vec![(*a, g.to_vec()), (*b, gb)]
                    }
                    OpKind::MulRow => {
                        let d = tb.numel();
                        let r = tb.data();
                        let mut ga = Vec::with_capacity(g.len());
                        let mut gb = vec![0.0; d];
                        for (k, gv) in g.iter().enumerate() {
                            ga.push(gv * r[k % d]);
                            gb[k % d] += gv * ta.data()[k];
                        }
                        vec![(*a, ga), (*b, gb)]
                    }
                    OpKind::MatMul => {
                        let (m, k) = (ta.shape()[0], ta.shape()[1]);
                        let n = tb.shape()[1];
                        let bt = transpose_raw(tb.data(), k, n);
                        let at = transpose_raw(ta.data(), m, k);
                        vec![
                            (*a, matmul_raw(g, &bt, m, n, k)),
                            (*b, matmul_raw(&at, g, k, m, n)),
                        ]
                    }
                    _ => unreachable!("not a binary op: {kind}"),
                }
            }
            Op::Unary(kind, a) => {
                let ta = val(a);
                let gx: Vec<f64> = match kind {
                    OpKind::Exp => g.iter().zip(out.data()).map(|(x, y)| x * y).collect(),
                    OpKind::Log => g.iter().zip(ta.data()).map(|(x, y)| x / y).collect(),
                    OpKind::Gelu => g
                        .iter()
                        .zip(ta.data())
                        .map(|(x, y)| x * gelu_grad(*y))
                        .collect(),
                    OpKind::Softplus => g
                        .iter()
                        .zip(ta.data())
                        .map(|(x, y)| x * sigmoid(*y))
                        .collect(),
                    OpKind::Sum => vec![g[0]; ta.numel()],
                    OpKind::Mean => vec![g[0] / ta.numel() as f64; ta.numel()],
                    OpKind::Transpose => transpose_raw(g, out.shape()[0], out.shape()[1]),
                    OpKind::Reshape => g.to_vec(),
                    OpKind::Softmax => {
                        let d = out.last_dim();
                        let mut gx = Vec::with_capacity(g.len());
                        for (gr, yr) in g.chunks(d).zip(out.data().chunks(d)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            gx.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                        }
                        gx
                    }
                    OpKind::LogSoftmax => {
                        let d = out.last_dim();
                        let mut gx = Vec::with_capacity(g.len());
                        for (gr, yr) in g.chunks(d).zip(out.data().chunks(d)) {
                            let s: f64 = gr.iter().sum();
                            gx.extend(gr.iter().zip(yr).map(|(x, y)| x - y.exp() * s));
                        }
                        gx
                    }
                    _ => unreachable!("not a unary op: {kind}"),
                };
                vec![(*a, gx)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::LayerNorm { x, inv_std } => {
                let d = out.last_dim();
                let df = d as f64;
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), is) in g.chunks(d).zip(out.data().chunks(d)).zip(inv_std) {
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gv, yv)| is / df * (df * gv - sg - yv * sgy)),
                    );
                }
                vec![(*x, gx)]
            }
            Op::NormalizeRows { x, norms } => {
                let d = out.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), n) in g.chunks(d).zip(out.data().chunks(d)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / n));
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { x, idx } => {
                let tx = val(x);
                let d = tx.last_dim();
                let mut gx = vec![0.0; tx.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[src * d + c] += g[r * d + c];
                    }
                }
                vec![(*x, gx)]
            }
            Op::SliceCols { x, start } => {
                let tx = val(x);
                let n = tx.shape()[1];
                let w = out.shape()[1];
                let mut gx = vec![0.0; tx.numel()];
                for r in 0..out.shape()[0] {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![(*x, gx)]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let len = val(p).numel();
                        let piece = g[off..off + len].to_vec();
                        off += len;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let m = out.shape()[0];
                let mut off = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = val(p).shape()[1];
                        let mut piece = Vec::with_capacity(m * w);
                        for r in 0..m {
                            piece.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        off += w;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::PickPerRow { x, cols } => {
                let tx = val(x);
                let n = tx.shape()[1];
                let mut gx = vec![0.0; tx.numel()];
                for (r, &c) in cols.iter().enumerate() {
                    gx[r * n + c] += g[r];
                }
                vec![(*x, gx)]
            }
            Op::Splat {
                feat,
                weights,
                targets,
            } => {
                let (tf, tw) = (val(feat), val(weights));
                let (p, c) = (tf.shape()[0], tf.shape()[1]);
                let d = tw.shape()[1];
                let mut gf = vec![0.0; tf.numel()];
                let mut gw = vec![0.0; tw.numel()];
                for i in 0..p {
                    let f = &tf.data()[i * c..(i + 1) * c];
                    for b in 0..d {
                        if let Some(t) = targets[i * d + b] {
                            let go = &g[t * c..(t + 1) * c];
                            let w = tw.data()[i * d + b];
                            let mut dot = 0.0;
                            for k in 0..c {
                                gf[i * c + k] += w * go[k];
                                dot += f[k] * go[k];
                            }
                            gw[i * d + b] += dot;
                        }
                    }
                }
                vec![(*feat, gf), (*weights, gw)]
            }
        }
    }

    /// Ops recorded so far, in order (for audits and reports).
    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// Checks that every recorded input precedes its consumer.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }
}
