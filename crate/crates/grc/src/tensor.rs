//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during a forward pass and records the
//! operation that produced it. [`Tape::backward`] walks the record in reverse
//! and accumulates gradients into every tensor created with
//! `requires_grad = true`. One backward pass per tape; tapes are cheap and a
//! fresh one is built per training step.
//!
//! Conventions:
//! * data is row-major; the last axis is the "column" axis,
//! * softmax / log-softmax / layer-norm act on the last axis, treating all
//!   leading axes as rows,
//! * shape mismatches are contract violations and panic,
//! * every forward op checks its output for NaN/Inf and panics with the
//!   operation name on a numerical fault.

use serde::{Deserialize, Serialize};

/// Additive mask value standing in for -inf before a softmax. Large enough
/// that masked positions round to exactly zero probability in f64.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Shape plus row-major data, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must equal the product of its shape"
        );
        TensorData { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData { shape, data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    MaskedFill { x: TensorId },
    Scale { x: TensorId, c: f64 },
    Exp { x: TensorId },
    Tanh { x: TensorId },
    Gelu { x: TensorId },
    Transpose { x: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    Embedding { table: TensorId, indices: Vec<usize> },
    Softmax { x: TensorId },
    LogSoftmax { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    CrossEntropy { logits: TensorId, targets: Vec<usize> },
    Gather { x: TensorId, cols: Vec<usize> },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    MinElem { a: TensorId, b: TensorId },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass and replays it backwards for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &str, data: &[f64]) {
    for &v in data {
        if !v.is_finite() {
            panic!("numerical fault in {op}: non-finite output");
        }
    }
}

/// Splits a shape into (rows, cols) with the last axis as columns.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    assert!(!shape.is_empty(), "zero-rank tensors are not supported");
    let cols = *shape.last().unwrap();
    let rows = shape.iter().rev().skip(1).product::<usize>().max(1);
    (rows, cols)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        id
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Registers an input tensor. Gradients accumulate here after `backward`
    /// when `requires_grad` is set.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf: data length must equal the product of its shape"
        );
        check_finite("leaf", &data);
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Non-differentiable input (masks, positional encodings, frozen stats).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], vec![1])
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        assert_eq!(self.nodes[id.0].data.len(), 1, "value: tensor is not a scalar");
        self.nodes[id.0].data[0]
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = {
            let s = self.shape(a);
            assert_eq!(s.len(), 2, "matmul lhs must be 2-D");
            (s[0], s[1])
        };
        let (k2, n) = {
            let s = self.shape(b);
            assert_eq!(s.len(), 2, "matmul rhs must be 2-D");
            (s[0], s[1])
        };
        assert_eq!(k, k2, "matmul inner dimensions must match");
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        check_finite("matmul", &out);
        let rg = self.any_grad(&[a, b]);
        self.push(out, vec![m, n], rg, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add: shapes must match");
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        check_finite("add", &out);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(out, shape, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shapes must match");
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        check_finite("sub", &out);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(out, shape, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shapes must match");
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        check_finite("mul", &out);
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(out, shape, rg, Op::Mul { a, b })
    }

    /// Adds a `[cols]` (or `[1, cols]`) bias to every row of `x`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(x));
        assert_eq!(self.nodes[bias.0].data.len(), cols, "add_bias: bias length must equal columns");
        let bd = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bd[c];
            }
        }
        check_finite("add_bias", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, bias]);
        self.push(out, shape, rg, Op::AddBias { x, bias })
    }

    /// Additive attention mask: entries of `mask` must be 0 or [`MASK_NEG`].
    /// The mask is a constant; gradients flow through `x` unchanged.
    pub fn masked_fill(&mut self, x: TensorId, mask: TensorId) -> TensorId {
        assert_eq!(self.shape(x), self.shape(mask), "masked_fill: mask shape must match");
        assert!(
            self.data(mask).iter().all(|&m| m == 0.0 || m == MASK_NEG),
            "masked_fill: mask entries must be 0 or MASK_NEG"
        );
        let out: Vec<f64> =
            self.data(x).iter().zip(self.data(mask)).map(|(v, m)| v + m).collect();
        check_finite("masked_fill", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::MaskedFill { x })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        check_finite("scale", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::Scale { x, c })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.exp()).collect();
        check_finite("exp", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::Exp { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        check_finite("tanh", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::Tanh { x })
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu_fwd(v)).collect();
        check_finite("gelu", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::Gelu { x })
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "transpose requires a 2-D tensor");
        let (r, c) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, vec![c, r], rg, Op::Transpose { x })
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: empty part list");
        let cols = self.shape(parts[0])[self.shape(parts[0]).len() - 1];
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            assert_eq!(c, cols, "concat_rows: column counts must match");
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = self.any_grad(parts);
        self.push(out, vec![rows, cols], rg, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Stacks 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let rows = rows_cols(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = rows_cols(self.shape(p));
                assert_eq!(r, rows, "concat_cols: row counts must match");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let pd = self.data(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        self.push(out, vec![rows, total], rg, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(x));
        assert!(start < end && end <= rows, "slice_rows: bounds out of range");
        let out = self.data(x)[start * cols..end * cols].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, vec![end - start, cols], rg, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(x));
        assert!(start < end && end <= cols, "slice_cols: bounds out of range");
        let w = end - start;
        let xd = self.data(x);
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&xd[r * cols + start..r * cols + end]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, vec![rows, w], rg, Op::SliceCols { x, start })
    }

    /// Row lookup: `out[i, :] = table[indices[i], :]`.
    pub fn embedding(&mut self, table: TensorId, indices: &[usize]) -> TensorId {
        let s = self.shape(table);
        assert_eq!(s.len(), 2, "embedding table must be 2-D");
        let (n, d) = (s[0], s[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < n, "embedding index {i} out of range for table of {n}");
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        self.push(out, vec![indices.len(), d], rg, Op::Embedding { table, indices: indices.to_vec() })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(x));
        let mut out = self.data(x).to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        check_finite("softmax", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::Softmax { x })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(x));
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        check_finite("log_softmax", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::LogSoftmax { x })
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(x));
        assert_eq!(self.nodes[gamma.0].data.len(), cols, "layer_norm: gamma length");
        assert_eq!(self.nodes[beta.0].data.len(), cols, "layer_norm: beta length");
        let xd = self.data(x);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let (mean, std) = row_mean_std(row, eps);
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) / std * g[c] + b[c];
            }
        }
        check_finite("layer_norm", &out);
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(out, shape, rg, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Mean negative log-likelihood of integer targets under `logits`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(logits));
        assert_eq!(targets.len(), rows, "cross_entropy: one target per row");
        let ld = self.data(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "cross_entropy: target {t} out of range");
            let row = &ld[r * cols..(r + 1) * cols];
            total -= row[t] - log_sum_exp(row);
        }
        let loss = total / rows as f64;
        check_finite("cross_entropy", &[loss]);
        let rg = self.nodes[logits.0].requires_grad;
        self.push(vec![loss], vec![1], rg, Op::CrossEntropy { logits, targets: targets.to_vec() })
    }

    /// Per-row column pick: `out[i] = x[i, cols[i]]`, shape `[rows, 1]`.
    pub fn gather(&mut self, x: TensorId, cols: &[usize]) -> TensorId {
        let (rows, width) = rows_cols(self.shape(x));
        assert_eq!(cols.len(), rows, "gather: one column per row");
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows);
        for (r, &c) in cols.iter().enumerate() {
            assert!(c < width, "gather: column {c} out of range");
            out.push(xd[r * width + c]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, vec![rows, 1], rg, Op::Gather { x, cols: cols.to_vec() })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        check_finite("sum_all", &[s]);
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        check_finite("mean_all", &[s]);
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::MeanAll { x })
    }

    /// Elementwise clamp; gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        assert!(lo <= hi, "clamp: lo must not exceed hi");
        let out: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(out, shape, rg, Op::Clamp { x, lo, hi })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "min_elem: shapes must match");
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x.min(*y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(out, shape, rg, Op::MinElem { a, b })
    }

    // ── backward ─────────────────────────────────────────────────────

    fn add_grad(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].data.len();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn take_grad(&self, id: TensorId) -> Option<Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        self.nodes[id.0].grad.clone()
    }

    /// Accumulates `dLoss/dTensor` into every `requires_grad` tensor.
    ///
    /// `loss` must be a scalar. Gradients add onto whatever is already stored,
    /// so calling backward twice on different losses accumulates both.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "backward: loss must be a scalar");
        assert!(!self.nodes.is_empty(), "backward: empty tape");
        assert!(
            self.nodes[loss.0].requires_grad,
            "backward: loss does not depend on any requires_grad tensor"
        );
        self.add_grad(loss, &[1.0]);

        for i in (0..self.nodes.len()).rev() {
            let id = TensorId(i);
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.take_grad(id) else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.nodes[a.0].requires_grad {
                        let bt = transpose_raw(self.data(b), k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = transpose_raw(self.data(a), m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.add_grad(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.add_grad(a, &grad);
                    self.add_grad(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.add_grad(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.add_grad(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> =
                            grad.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> =
                            grad.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                        self.add_grad(b, &db);
                    }
                }
                Op::AddBias { x, bias } => {
                    self.add_grad(x, &grad);
                    if self.nodes[bias.0].requires_grad {
                        let cols = self.nodes[bias.0].data.len();
                        let rows = grad.len() / cols;
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += grad[r * cols + c];
                            }
                        }
                        self.add_grad(bias, &db);
                    }
                }
                Op::MaskedFill { x } => self.add_grad(x, &grad),
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.add_grad(x, &dx);
                }
                Op::Exp { x } => {
                    let dx: Vec<f64> =
                        grad.iter().zip(&self.nodes[i].data).map(|(g, y)| g * y).collect();
                    self.add_grad(x, &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.data(x))
                        .map(|(g, &v)| g * gelu_bwd(v))
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let dx = transpose_raw(&grad, c, r);
                    self.add_grad(x, &dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let len = self.nodes[p.0].data.len();
                        let slice = grad[offset..offset + len].to_vec();
                        self.add_grad(p, &slice);
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = *self.nodes[i].shape.last().unwrap();
                    let rows = self.nodes[i].data.len() / total;
                    let mut offset = 0;
                    for &p in &parts {
                        let w = rows_cols(self.shape(p)).1;
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                        }
                        self.add_grad(p, &dp);
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let mut dx = vec![0.0; rows * cols];
                    dx[start * cols..start * cols + grad.len()].copy_from_slice(&grad);
                    self.add_grad(x, &dx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let w = self.nodes[i].data.len() / rows;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + w]
                            .copy_from_slice(&grad[r * w..(r + 1) * w]);
                    }
                    self.add_grad(x, &dx);
                }
                Op::Embedding { table, indices } => {
                    let d = self.shape(table)[1];
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..d {
                            dt[idx * d + c] += grad[r * d + c];
                        }
                    }
                    self.add_grad(table, &dt);
                }
                Op::Softmax { x } => {
                    let (rows, cols) = rows_cols(&self.nodes[i].shape);
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 =
                            (0..cols).map(|c| grad[base + c] * y[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = y[base + c] * (grad[base + c] - dot);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LogSoftmax { x } => {
                    let (rows, cols) = rows_cols(&self.nodes[i].shape);
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let gsum: f64 = (0..cols).map(|c| grad[base + c]).sum();
                        for c in 0..cols {
                            dx[base + c] = grad[base + c] - y[base + c].exp() * gsum;
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let xd = self.data(x).to_vec();
                    let g = self.data(gamma).to_vec();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &xd[r * cols..(r + 1) * cols];
                        let (mean, std) = row_mean_std(row, eps);
                        let base = r * cols;
                        let mut sum_gy = 0.0;
                        let mut sum_gyx = 0.0;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) / std;
                            let gy = grad[base + c] * g[c];
                            sum_gy += gy;
                            sum_gyx += gy * xhat;
                            dgamma[c] += grad[base + c] * xhat;
                            dbeta[c] += grad[base + c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) / std;
                            let gy = grad[base + c] * g[c];
                            dx[base + c] = (gy - sum_gy / n - xhat * sum_gyx / n) / std;
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::CrossEntropy { logits, targets } => {
                    let (rows, cols) = rows_cols(self.shape(logits));
                    let ld = self.data(logits).to_vec();
                    let g = grad[0] / rows as f64;
                    let mut dl = vec![0.0; ld.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &ld[r * cols..(r + 1) * cols];
                        let lse = log_sum_exp(row);
                        for c in 0..cols {
                            let p = (row[c] - lse).exp();
                            dl[r * cols + c] = g * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.add_grad(logits, &dl);
                }
                Op::Gather { x, cols } => {
                    let width = rows_cols(self.shape(x)).1;
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    for (r, &c) in cols.iter().enumerate() {
                        dx[r * width + c] += grad[r];
                    }
                    self.add_grad(x, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![grad[0]; self.nodes[x.0].data.len()];
                    self.add_grad(x, &dx);
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].data.len();
                    let dx = vec![grad[0] / n as f64; n];
                    self.add_grad(x, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.data(x))
                        .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                Op::MinElem { a, b } => {
                    let ad = self.data(a).to_vec();
                    let bd = self.data(b).to_vec();
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(ad.iter().zip(&bd))
                            .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                            .collect();
                        self.add_grad(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(ad.iter().zip(&bd))
                            .map(|(g, (x, y))| if x > y { *g } else { 0.0 })
                            .collect();
                        self.add_grad(b, &db);
                    }
                }
            }
        }
    }
}

// ── raw helpers ─────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// In-place stable softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Stable log-sum-exp of one row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Entropy of a probability vector in nats, with 0 ln 0 = 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

fn row_mean_std(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

pub mod gradcheck {
    //! Central finite-difference verification of analytic gradients.
    //!
    //! Re-runs a user-supplied forward builder with perturbed leaf values and
    //! compares the numeric slope against the tape's backward result. The
    //! checker never inspects the backward implementation, only forward
    //! evaluations.

    use super::{Tape, TensorId};

    /// A forward graph: consumes leaf values, returns the scalar loss id.
    pub type BuildFn<'a> = &'a dyn Fn(&mut Tape, &[Vec<f64>]) -> TensorId;

    /// Largest relative gradient error over all leaf elements.
    ///
    /// Relative error uses `|a - n| / max(1e-6, |a| + |n|)` so near-zero
    /// gradients are compared absolutely.
    pub fn max_rel_error(build: BuildFn, leaves: &[Vec<f64>], h: f64) -> f64 {
        let mut tape = Tape::new();
        let loss = build(&mut tape, leaves);
        tape.backward(loss);
        let mut analytic: Vec<Vec<f64>> = Vec::new();
        for i in 0..leaves.len() {
            let id = TensorId(i);
            analytic.push(tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| {
                vec![0.0; leaves[i].len()]
            }));
        }

        let eval = |vals: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let l = build(&mut t, vals);
            t.value(l)
        };

        let mut worst = 0.0f64;
        for (li, leaf) in leaves.iter().enumerate() {
            for ei in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                plus[li][ei] += h;
                let mut minus = leaves.to_vec();
                minus[li][ei] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[li][ei];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_logits() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0, 0.0, 0.0], vec![1, 3], false);
        let s = t.softmax(x);
        for &p in t.data(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 0.5, 3.0, 100.0, -100.0], vec![2, 3], false);
        let s = t.softmax(x);
        for r in 0..2 {
            let sum: f64 = t.data(s)[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut t = Tape::new();
        let x = t.leaf(vec![50.0, 0.0, 0.0], vec![1, 3], false);
        let ce = t.cross_entropy(x, &[0]);
        assert!(t.value(ce) < 1e-9);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = crate::rng::stream_rng(3, &[]);
        let x: Vec<f64> = (0..9).map(|_| crate::rng::next_gaussian(&mut rng)).collect();
        let mut t = Tape::new();
        let eye = t.leaf(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![3, 3],
            false,
        );
        let xm = t.leaf(x.clone(), vec![3, 3], false);
        let y = t.matmul(eye, xm);
        assert_eq!(t.data(y), &x[..]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![1, 2], true);
        let sq = t.mul(x, x);
        let loss = t.sum_all(sq);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_softmax_cross_entropy_is_probs_minus_onehot() {
        let mut t = Tape::new();
        let logits = t.leaf(vec![0.3, -0.7, 1.1], vec![1, 3], true);
        let loss = t.cross_entropy(logits, &[2]);
        t.backward(loss);
        let probs = {
            let mut row = vec![0.3, -0.7, 1.1];
            softmax_row(&mut row);
            row
        };
        let grad = t.grad(logits).unwrap();
        for c in 0..3 {
            let expect = probs[c] - if c == 2 { 1.0 } else { 0.0 };
            assert!((grad[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_fill_zeroes_probability() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], false);
        let mask = t.constant(vec![0.0, MASK_NEG, 0.0], vec![1, 3]);
        let masked = t.masked_fill(x, mask);
        let probs = t.softmax(masked);
        assert_eq!(t.data(probs)[1], 0.0);
        let sum: f64 = t.data(probs).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "numerical fault")]
    fn non_finite_output_panics_with_op_identity() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1e308, 1e308], vec![1, 2], false);
        let _ = t.exp(x);
    }

    #[test]
    #[should_panic(expected = "loss must be a scalar")]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![1, 2], true);
        let y = t.mul(x, x);
        t.backward(y);
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(11, &[]);
        let mut gauss = |n: usize| -> Vec<f64> {
            (0..n).map(|_| crate::rng::next_gaussian(&mut rng) * 0.5).collect()
        };
        let leaves = vec![gauss(6), gauss(6), gauss(3), gauss(6), gauss(4)];
        let build: gradcheck::BuildFn = &|t, vals| {
            let x = t.leaf(vals[0].clone(), vec![2, 3], true);
            let w1 = t.leaf(vals[1].clone(), vec![3, 2], true);
            let b1 = t.leaf(vals[2].clone(), vec![3], true);
            let w2 = t.leaf(vals[3].clone(), vec![2, 3], true);
            let _unused = t.leaf(vals[4].clone(), vec![4], true);
            let h = t.matmul(x, w1);
            let h = t.gelu(h);
            let o = t.matmul(h, w2);
            let o = t.add_bias(o, b1);
            t.cross_entropy(o, &[0, 2])
        };
        let err = gradcheck::max_rel_error(build, &leaves, 1e-5);
        assert!(err < 1e-4, "rel error {err}");
    }

    #[test]
    fn gradients_accumulate_additively_into_leaves() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0], vec![1], true);
        let a = t.scale(x, 2.0);
        let b = t.scale(x, 5.0);
        let s = t.add(a, b);
        let loss = t.sum_all(s);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn entropy_of_one_hot_is_zero() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        let u = entropy(&[0.25; 4]);
        assert!((u - (4.0f64).ln()).abs() < 1e-12);
    }
}
