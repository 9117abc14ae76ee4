//! Reverse-mode autodiff over a linear tape.
//!
//! Ops execute eagerly and record themselves; [`Graph::backward`] replays
//! the tape in reverse, visiting each node once. Everything on the tape is
//! rank-2 (scalars are 1×1).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Additive-mask value for blocked attention positions. Finite on purpose:
/// actual -inf produces NaN through the max-subtraction stabilizer.
pub const MASK_BLOCK: f64 = -1e9;

/// Threshold below which a mask entry counts as blocked.
pub const BLOCKED_BELOW: f64 = -1e8;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op<F: Float> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// matrix + broadcast row
    AddRow(Var, Var),
    Gelu(Var),
    MaskedSoftmax {
        input: Var,
        /// rows forced to uniform because every position was blocked
        degenerate: Vec<usize>,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        eps: F,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    NormalizeRows(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        sum: bool,
    },
    SumAll(Var),
}

struct Node<F: Float> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// The tape.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    backward_done: bool,
    /// Count of fully-blocked softmax rows encountered (padding diagnostics).
    pub degenerate_softmax_rows: usize,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            degenerate_softmax_rows: 0,
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf: participates in backward.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k1) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k1 != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = vec![F::ZERO; m * n];
        matmul_acc(
            &self.value(a).data,
            &self.value(b).data,
            &mut out,
            m,
            k1,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = &self.value(a).data;
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), Tensor::matrix(c, r, out)?, rg))
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), t, rg)
    }

    /// `a[r×c] + row`, row broadcast over all rows (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(row).numel() != c {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(row).shape.clone(),
            });
        }
        let mut data = self.value(a).data.clone();
        let rowv = &self.value(row).data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowv[j];
            }
        }
        let t = Tensor::matrix(r, c, data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), t, rg))
    }

    /// Exact GELU, x·Φ(x) with the error-function Φ.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(Op::Gelu(a), t, rg)
    }

    /// Row-wise softmax of `logits + mask` over the last axis, stabilized by
    /// max-subtraction. A row whose every position is blocked comes back
    /// uniform and bumps `degenerate_softmax_rows`.
    ///
    /// The mask must be the same shape as the logits or a single broadcast
    /// row; entries are 0 (visible) or [`MASK_BLOCK`].
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor<F>) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        let mask_rows = match mask.dims2() {
            Ok((mr, mc)) if mc == c && (mr == r || mr == 1) => mr,
            _ => {
                return Err(CoreError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: self.value(logits).shape.clone(),
                    rhs: mask.shape.clone(),
                })
            }
        };
        let blocked = F::from_f64(BLOCKED_BELOW);
        let mut out = vec![F::ZERO; r * c];
        let mut degenerate = Vec::new();
        for i in 0..r {
            let lrow = self.value(logits).row(i);
            let mrow = mask.row(if mask_rows == 1 { 0 } else { i });
            if mrow.iter().all(|&m| m < blocked) {
                let u = F::ONE / F::from_usize(c);
                for j in 0..c {
                    out[i * c + j] = u;
                }
                degenerate.push(i);
                continue;
            }
            let mut maxv = F::from_f64(f64::NEG_INFINITY);
            for j in 0..c {
                maxv = maxv.maxv(lrow[j] + mrow[j]);
            }
            let mut sum = F::ZERO;
            for j in 0..c {
                let e = (lrow[j] + mrow[j] - maxv).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / sum;
            }
        }
        self.degenerate_softmax_rows += degenerate.len();
        let rg = self.rg(logits);
        Ok(self.push(
            Op::MaskedSoftmax {
                input: logits,
                degenerate,
            },
            Tensor::matrix(r, c, out)?,
            rg,
        ))
    }

    /// Per-row normalization over the last axis, then affine by gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(gain).shape.clone(),
            });
        }
        let mut out = vec![F::ZERO; r * c];
        let inv_c = F::ONE / F::from_usize(c);
        for i in 0..r {
            let row = self.value(x).row(i);
            let mut mean = F::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = F::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = F::ONE / (var + eps).sqrt();
            let g = &self.value(gain).data;
            let b = &self.value(bias).data;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                eps,
            },
            Tensor::matrix(r, c, out)?,
            rg,
        ))
    }

    /// Select rows by index (embedding lookup, CLS extraction, ...).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        for &i in rows {
            if i >= r {
                return Err(CoreError::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(self.value(x).row(i));
        }
        let t = Tensor::matrix(rows.len(), c, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
            t,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_rows: no inputs"));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            rows += pr;
            data.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor::matrix(rows, c, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(CoreError::IndexOutOfRange {
                what: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { input: x, start, len }, t, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat_cols: no inputs"));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut total_c = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(r, total_c, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, rg))
    }

    /// L2-normalize each row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let eps = F::from_f64(1e-12);
        let mut out = vec![F::ZERO; r * c];
        for i in 0..r {
            let row = self.value(x).row(i);
            let mut sq = F::ZERO;
            for &v in row {
                sq += v * v;
            }
            let inv = F::ONE / (sq + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::NormalizeRows(x), t, rg))
    }

    /// −log softmax(logits_row)[target] summed (or averaged) over rows.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], sum: bool) -> Result<Var> {
        let (r, k) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(CoreError::invalid(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        for &t in targets {
            if t >= k {
                return Err(CoreError::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: k,
                });
            }
        }
        let mut total = F::ZERO;
        for i in 0..r {
            let row = self.value(logits).row(i);
            let mut maxv = row[0];
            for &v in row {
                maxv = maxv.maxv(v);
            }
            let mut lse = F::ZERO;
            for &v in row {
                lse += (v - maxv).exp();
            }
            let lse = lse.ln() + maxv;
            total += lse - row[targets[i]];
        }
        if !sum && r > 0 {
            total *= F::ONE / F::from_usize(r);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                sum,
            },
            Tensor::scalar(total),
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut total = F::ZERO;
        for &v in &self.nodes[x.0].value.data {
            total += v;
        }
        let rg = self.rg(x);
        self.push(Op::SumAll(x), Tensor::scalar(total), rg)
    }

    /// Run backpropagation from a scalar loss. Populates gradients readable
    /// via [`Graph::grad`]. Calling twice on one tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        if self.backward_done {
            return Err(CoreError::invalid(
                "backward: already ran on this tape (build a fresh graph per step)",
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::scalar(F::ONE));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. a node, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    fn acc(&mut self, v: Var, delta: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor<F>) {
        // The op descriptor is cloned out so gradient accumulation can
        // borrow the tape mutably inside each arm.
        let op = self.nodes[idx].op.clone();
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).shape[1];
                let mut da = vec![F::ZERO; m * k];
                matmul_a_bt_acc(&g.data, &self.value(b).data, &mut da, m, n, k);
                let mut db = vec![F::ZERO; k * n];
                matmul_at_b_acc(&self.value(a).data, &g.data, &mut db, k, m, n);
                self.acc(a, Tensor::matrix(m, k, da).unwrap());
                self.acc(b, Tensor::matrix(k, n, db).unwrap());
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = self.value(a).dims2().unwrap();
                let mut da = vec![F::ZERO; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g.data[i * r + j];
                    }
                }
                self.acc(a, Tensor::matrix(r, c, da).unwrap());
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&self.value(b).data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect(),
                };
                let db = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(&gv, &av)| gv * av)
                        .collect(),
                };
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                self.acc(a, g.map(|x| x * s));
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let (r, c) = self.value(a).dims2().unwrap();
                self.acc(a, g.clone());
                let mut drow = vec![F::ZERO; c];
                for i in 0..r {
                    for j in 0..c {
                        drow[j] += g.data[i * c + j];
                    }
                }
                let shape = self.value(row).shape.clone();
                self.acc(row, Tensor { shape, data: drow });
            }
            Op::Gelu(a) => {
                let a = *a;
                let da = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                        .collect(),
                };
                self.acc(a, da);
            }
            Op::MaskedSoftmax {
                input, degenerate, ..
            } => {
                let input = *input;
                let degenerate = degenerate.clone();
                let y = self.nodes[idx].value.clone();
                let (r, c) = y.dims2().unwrap();
                let mut dx = vec![F::ZERO; r * c];
                for i in 0..r {
                    if degenerate.binary_search(&i).is_ok() {
                        continue; // forced-uniform row: no gradient
                    }
                    let yr = y.row(i);
                    let gr = &g.data[i * c..(i + 1) * c];
                    let mut dot = F::ZERO;
                    for j in 0..c {
                        dot += yr[j] * gr[j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(input, Tensor::matrix(r, c, dx).unwrap());
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let (input, gain, bias, eps) = (*input, *gain, *bias, *eps);
                let (r, c) = self.value(input).dims2().unwrap();
                let inv_c = F::ONE / F::from_usize(c);
                let gain_v = self.value(gain).data.clone();
                let mut dx = vec![F::ZERO; r * c];
                let mut dgain = vec![F::ZERO; c];
                let mut dbias = vec![F::ZERO; c];
                for i in 0..r {
                    let row = self.value(input).row(i);
                    let mut mean = F::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_c;
                    let mut var = F::ZERO;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_c;
                    let inv_std = F::ONE / (var + eps).sqrt();
                    let gr = &g.data[i * c..(i + 1) * c];
                    let mut mean_gg = F::ZERO;
                    let mut mean_ggx = F::ZERO;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let gg = gr[j] * gain_v[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    mean_gg *= inv_c;
                    mean_ggx *= inv_c;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_std;
                        let gg = gr[j] * gain_v[j];
                        dx[i * c + j] = (gg - mean_gg - xhat * mean_ggx) * inv_std;
                    }
                }
                self.acc(input, Tensor::matrix(r, c, dx).unwrap());
                let gshape = self.value(gain).shape.clone();
                let bshape = self.value(bias).shape.clone();
                self.acc(
                    gain,
                    Tensor {
                        shape: gshape,
                        data: dgain,
                    },
                );
                self.acc(
                    bias,
                    Tensor {
                        shape: bshape,
                        data: dbias,
                    },
                );
            }
            Op::GatherRows { input, rows } => {
                let input = *input;
                let rows = rows.clone();
                let (r, c) = self.value(input).dims2().unwrap();
                let mut dx = vec![F::ZERO; r * c];
                for (out_i, &src_i) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[src_i * c + j] += g.data[out_i * c + j];
                    }
                }
                self.acc(input, Tensor::matrix(r, c, dx).unwrap());
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.value(p).dims2().unwrap();
                    let slice = g.data[offset..offset + pr * pc].to_vec();
                    offset += pr * pc;
                    self.acc(p, Tensor::matrix(pr, pc, slice).unwrap());
                }
            }
            Op::SliceCols { input, start, len } => {
                let (input, start, len) = (*input, *start, *len);
                let (r, c) = self.value(input).dims2().unwrap();
                let mut dx = vec![F::ZERO; r * c];
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] = g.data[i * len + j];
                    }
                }
                self.acc(input, Tensor::matrix(r, c, dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.value(parts[0]).shape[0];
                let total_c = g.shape[1];
                let mut col_off = 0;
                for p in parts {
                    let pc = self.value(p).shape[1];
                    let mut dp = vec![F::ZERO; r * pc];
                    for i in 0..r {
                        for j in 0..pc {
                            dp[i * pc + j] = g.data[i * total_c + col_off + j];
                        }
                    }
                    col_off += pc;
                    self.acc(p, Tensor::matrix(r, pc, dp).unwrap());
                }
            }
            Op::NormalizeRows(a) => {
                let a = *a;
                let (r, c) = self.value(a).dims2().unwrap();
                let eps = F::from_f64(1e-12);
                let mut dx = vec![F::ZERO; r * c];
                for i in 0..r {
                    let row = self.value(a).row(i);
                    let mut sq = F::ZERO;
                    for &v in row {
                        sq += v * v;
                    }
                    let norm = (sq + eps).sqrt();
                    let inv = F::ONE / norm;
                    let gr = &g.data[i * c..(i + 1) * c];
                    let mut dot = F::ZERO;
                    for j in 0..c {
                        dot += gr[j] * row[j] * inv;
                    }
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - row[j] * inv * dot) * inv;
                    }
                }
                self.acc(a, Tensor::matrix(r, c, dx).unwrap());
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                sum,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let sum = *sum;
                let (r, k) = self.value(logits).dims2().unwrap();
                let w = if sum || r == 0 {
                    g.item()
                } else {
                    g.item() * (F::ONE / F::from_usize(r))
                };
                let mut dx = vec![F::ZERO; r * k];
                for i in 0..r {
                    let row = self.value(logits).row(i);
                    let mut maxv = row[0];
                    for &v in row {
                        maxv = maxv.maxv(v);
                    }
                    let mut sume = F::ZERO;
                    for &v in row {
                        sume += (v - maxv).exp();
                    }
                    for j in 0..k {
                        let p = (row[j] - maxv).exp() / sume;
                        let y = if j == targets[i] { F::ONE } else { F::ZERO };
                        dx[i * k + j] = (p - y) * w;
                    }
                }
                self.acc(logits, Tensor::matrix(r, k, dx).unwrap());
            }
            Op::SumAll(a) => {
                let a = *a;
                let gv = g.item();
                let shape = self.value(a).shape.clone();
                let n = self.value(a).numel();
                self.acc(
                    a,
                    Tensor {
                        shape,
                        data: vec![gv; n],
                    },
                );
            }
        }
    }
}

pub fn gelu_scalar<F: Float>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    x * half * (F::ONE + (x * inv_sqrt2).erf())
}

fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let phi_cdf = half * (F::ONE + (x * inv_sqrt2).erf());
    let inv_sqrt_2pi = F::from_f64(0.3989422804014327);
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    phi_cdf + x * pdf
}
