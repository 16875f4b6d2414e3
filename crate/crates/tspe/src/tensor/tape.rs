//! Reverse-mode differentiation over an explicit operation tape.
//!
//! A training step builds one graph: leaves are created from parameter
//! matrices, operations record themselves onto the tape as they compute
//! their forward value, and `backward` replays the tape in reverse,
//! accumulating gradients into every node.
//!
//! Softmax denominators and the `attend` contraction sum their terms in
//! ascending value order. Summed multisets are therefore independent of
//! input row order, which makes the attention rows and prefix vectors
//! bit-exactly equivariant under timestep permutation.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Hadamard(VarId, VarId),
    Scale(VarId, f64),
    /// x (m x n) plus a 1 x n bias row broadcast over rows.
    AddRowBroadcast(VarId, VarId),
    Matmul(VarId, VarId),
    /// a * b^T without materializing the transpose.
    MatmulNT(VarId, VarId),
    /// The backward pass only needs the softmax output, so the masked
    /// variant records the same op (masked positions have zero output and
    /// therefore zero input gradient).
    SoftmaxRows(VarId),
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    },
    Gelu(VarId),
    ConcatRows(Vec<VarId>),
    SliceRows(VarId, usize, usize),
    Embed {
        table: VarId,
        ids: Vec<usize>,
    },
    /// weights (1 x t) times values (t x d) with value-sorted summation.
    Attend {
        weights: VarId,
        values: VarId,
    },
    CrossEntropy {
        logits: VarId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

/// Computation tape. One per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, VarId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable softmax of one row; the denominator is summed in
/// ascending value order.
pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let denom: f64 = sorted.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Sum of `terms` in ascending value order.
fn sorted_sum(terms: &mut Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Leaves registered as parameters, in creation order.
    pub fn param_leaves(&self) -> &[(String, VarId)] {
        &self.params
    }

    /// Constant leaf; receives a gradient but is not listed as a parameter.
    pub fn leaf(&mut self, value: Matrix) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; its gradient is routed back to the named parameter
    /// by the trainer.
    pub fn param(&mut self, name: impl Into<String>, value: &Matrix) -> VarId {
        let id = self.push(value.clone(), Op::Leaf);
        self.params.push((name.into(), id));
        id
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row_broadcast(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: format!("{}x{}", xv.rows(), xv.cols()),
                right: format!("{}x{}", bv.rows(), bv.cols()),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + bv.get(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(x, bias)))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatmulNT(a, b)))
    }

    pub fn softmax_rows(&mut self, x: VarId) -> VarId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let sm = softmax_row(xv.row(r));
            out.data_mut()[r * xv.cols()..(r + 1) * xv.cols()].copy_from_slice(&sm);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn softmax_rows_masked(&mut self, x: VarId, mask: Matrix) -> Result<VarId> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows_masked",
                left: format!("{}x{}", xv.rows(), xv.cols()),
                right: format!("{}x{}", mask.rows(), mask.cols()),
            });
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row: Vec<f64> = xv
                .row(r)
                .iter()
                .zip(mask.row(r).iter())
                .map(|(v, m)| v + m)
                .collect();
            let sm = softmax_row(&row);
            out.data_mut()[r * xv.cols()..(r + 1) * xv.cols()].copy_from_slice(&sm);
        }
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.rows() != 1 || g.cols() != xv.cols() || b.rows() != 1 || b.cols() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: format!("{}x{}", xv.rows(), xv.cols()),
                right: format!("gamma {}x{}", g.rows(), g.cols()),
            });
        }
        let n = xv.cols() as f64;
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean: f64 = row.iter().sum::<f64>() / n;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            for c in 0..xv.cols() {
                let xhat = (row[c] - mean) / s;
                out.set(r, c, g.get(0, c) * xhat + b.get(0, c));
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| gelu_scalar(*v)).collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: format!("cols {cols}"),
                    right: format!("cols {}", pv.cols()),
                });
            }
            for r in 0..pv.rows() {
                rows.push(pv.row(r).to_vec());
            }
        }
        let v = Matrix::from_rows(&rows)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let xv = self.value(x);
        if end > xv.rows() || start >= end {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: format!("{}x{}", xv.rows(), xv.cols()),
                right: format!("rows {start}..{end}"),
            });
        }
        let rows: Vec<Vec<f64>> = (start..end).map(|r| xv.row(r).to_vec()).collect();
        let v = Matrix::from_rows(&rows)?;
        Ok(self.push(v, Op::SliceRows(x, start, end)))
    }

    pub fn embed(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let tv = self.value(table);
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            if *id >= tv.rows() {
                return Err(Error::Data(format!(
                    "token id {id} out of range for table with {} rows",
                    tv.rows()
                )));
            }
            rows.push(tv.row(*id).to_vec());
        }
        let v = Matrix::from_rows(&rows)?;
        Ok(self.push(
            v,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Contraction `weights * values` for a single attention row, summed
    /// per output coordinate in ascending term order.
    pub fn attend(&mut self, weights: VarId, values: VarId) -> Result<VarId> {
        let w = self.value(weights);
        let v = self.value(values);
        if w.rows() != 1 || w.cols() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "attend",
                left: format!("{}x{}", w.rows(), w.cols()),
                right: format!("{}x{}", v.rows(), v.cols()),
            });
        }
        let t = w.cols();
        let d = v.cols();
        let mut out = Matrix::zeros(1, d);
        let mut terms = Vec::with_capacity(t);
        for c in 0..d {
            terms.clear();
            for j in 0..t {
                terms.push(w.get(0, j) * v.get(j, c));
            }
            out.set(0, c, sorted_sum(&mut terms));
        }
        Ok(self.push(out, Op::Attend { weights, values }))
    }

    /// Mean negative log-likelihood over unmasked positions.
    ///
    /// `mask[i] == true` means position i contributes to the loss.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize], mask: &[bool]) -> Result<VarId> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || mask.len() != lv.rows() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: format!("{} logit rows", lv.rows()),
                right: format!("{} targets / {} mask", targets.len(), mask.len()),
            });
        }
        let n_active = mask.iter().filter(|m| **m).count();
        if n_active == 0 {
            return Err(Error::Config(
                "cross_entropy: all positions masked, nothing to score".into(),
            ));
        }
        let vocab = lv.cols();
        let mut total = 0.0;
        for (i, (tgt, m)) in targets.iter().zip(mask.iter()).enumerate() {
            if !*m {
                continue;
            }
            if *tgt >= vocab {
                return Err(Error::Data(format!(
                    "target id {tgt} out of range for vocab {vocab}"
                )));
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[*tgt];
        }
        let loss = total / n_active as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let v = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, id: VarId, delta: Matrix) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                g.add_assign(&delta).expect("gradient shape");
            }
            None => node.grad = Some(delta),
        }
    }

    /// Run reverse-mode accumulation from `root` (a 1x1 scalar).
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        {
            let rv = self.value(root);
            if rv.shape() != (1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    left: format!("{}x{}", rv.rows(), rv.cols()),
                    right: "1x1".into(),
                });
            }
            if !rv.is_finite() {
                return Err(Error::Numeric("backward from non-finite root".into()));
            }
        }
        self.nodes[root.0].grad = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let grad = match self.nodes[idx].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            // Ops are matched by value-copied metadata; parent values are
            // read immutably before accumulation.
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad.hadamard(self.value(b))?;
                    let db = grad.hadamard(self.value(a))?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, grad.scale(c));
                }
                Op::AddRowBroadcast(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    let mut db = Matrix::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            let v = db.get(0, c) + grad.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    self.accumulate(x, grad);
                    self.accumulate(bias, db);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul_nt(self.value(b))?;
                    let db = self.value(a).matmul_tn(&grad)?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatmulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad.matmul(self.value(b))?;
                    let db = grad.matmul_tn(self.value(a))?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let y = self.nodes[idx].value.clone();
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = grad.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xv = self.value(x).clone();
                    let gv = self.value(gamma).clone();
                    let n = xv.cols() as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dgamma = Matrix::zeros(1, xv.cols());
                    let mut dbeta = Matrix::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let mean: f64 = row.iter().sum::<f64>() / n;
                        let var: f64 =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let s = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / s).collect();
                        let gr = grad.row(r);
                        let dxhat: Vec<f64> = (0..xv.cols())
                            .map(|c| gr[c] * gv.get(0, c))
                            .collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for c in 0..xv.cols() {
                            let v = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / s;
                            dx.set(r, c, v);
                            let dg = dgamma.get(0, c) + gr[c] * xhat[c];
                            dgamma.set(0, c, dg);
                            let db = dbeta.get(0, c) + gr[c];
                            dbeta.set(0, c, db);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let xv = self.value(x);
                    let data: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(grad.data().iter())
                        .map(|(v, g)| gelu_grad_scalar(*v) * g)
                        .collect();
                    let dx = Matrix::from_vec(xv.rows(), xv.cols(), data)?;
                    self.accumulate(x, dx);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let mut dp = Matrix::zeros(rows, grad.cols());
                        for r in 0..rows {
                            for c in 0..grad.cols() {
                                dp.set(r, c, grad.get(offset + r, c));
                            }
                        }
                        offset += rows;
                        self.accumulate(p, dp);
                    }
                }
                Op::SliceRows(x, start, _end) => {
                    let (x, start) = (*x, *start);
                    let xv = self.value(x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            dx.set(start + r, c, grad.get(r, c));
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let (tr, tc) = self.value(table).shape();
                    // scatter straight into the table's gradient; a dense
                    // per-node temporary would dominate allocation for
                    // large vocabularies
                    let node = &mut self.nodes[table.0];
                    let gt = node.grad.get_or_insert_with(|| Matrix::zeros(tr, tc));
                    for (r, id) in ids.iter().enumerate() {
                        for c in 0..grad.cols() {
                            let v = gt.get(*id, c) + grad.get(r, c);
                            gt.set(*id, c, v);
                        }
                    }
                }
                Op::Attend { weights, values } => {
                    let (weights, values) = (*weights, *values);
                    let w = self.value(weights).clone();
                    let v = self.value(values).clone();
                    let mut dw = Matrix::zeros(1, w.cols());
                    let mut dv = Matrix::zeros(v.rows(), v.cols());
                    for j in 0..w.cols() {
                        let mut acc = 0.0;
                        for c in 0..v.cols() {
                            acc += grad.get(0, c) * v.get(j, c);
                            dv.set(j, c, w.get(0, j) * grad.get(0, c));
                        }
                        dw.set(0, j, acc);
                    }
                    self.accumulate(weights, dw);
                    self.accumulate(values, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let mask = mask.clone();
                    let lv = self.value(logits).clone();
                    let n_active = mask.iter().filter(|m| **m).count() as f64;
                    let g = grad.scalar();
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for (i, (tgt, m)) in targets.iter().zip(mask.iter()).enumerate() {
                        if !*m {
                            continue;
                        }
                        let sm = softmax_row(lv.row(i));
                        for c in 0..lv.cols() {
                            let onehot = if c == *tgt { 1.0 } else { 0.0 };
                            dl.set(i, c, g * (sm[c] - onehot) / n_active);
                        }
                    }
                    self.accumulate(logits, dl);
                }
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of a plain matrix (no tape involvement).
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let sm = softmax_row(m.row(r));
        out.data_mut()[r * m.cols()..(r + 1) * m.cols()].copy_from_slice(&sm);
    }
    out
}
