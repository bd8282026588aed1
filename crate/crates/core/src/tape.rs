//! Reverse-mode autodiff on a Wengert tape.
//!
//! Every differentiable primitive is recorded as an [`Op`] referencing
//! earlier tape entries, so creation order is already a topological order.
//! [`GradTape::backward`] replays the record once, in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers.
//!
//! The tape is confined to one training or inference context; it is not
//! shared across threads.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, Tensor};

/// Identity of a value on the tape.
pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(VarId, VarId),
    Transpose(VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    AddRow(VarId, VarId),
    MulRow(VarId, VarId),
    SoftmaxLastDim(VarId),
    LayerNorm(VarId, f64),
    Gelu(VarId),
    ConcatRows(Vec<VarId>),
    SliceRows(VarId, usize),
    ConcatCols(Vec<VarId>),
    SliceCols(VarId, usize),
    SumAll(VarId),
    MeanAll(VarId),
}

struct Node {
    op: Op,
    value: Tensor,
    param: bool,
}

/// Ordered record of primitive operations and the tensors they produced.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    /// Place a tensor on the tape. It becomes a gradient target iff it was
    /// marked with [`Tensor::with_grad`].
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        let param = value.requires_grad();
        self.push(Op::Leaf, value, param)
    }

    /// Place a tensor on the tape as a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, param: bool) -> VarId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, param });
        id
    }

    fn record(&mut self, op: Op, value: Tensor) -> VarId {
        self.push(op, value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Recorded primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(Op::Matmul(a, b), v))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).transpose()?;
        Ok(self.record(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.record(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let v = self.value(a).scale(c)?;
        Ok(self.record(Op::Scale(a, c), v))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let v = self.value(a).add_scalar(c)?;
        Ok(self.record(Op::AddScalar(a), v))
    }

    pub fn add_row(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        let out = self.value(a).add_row(self.value(v))?;
        Ok(self.record(Op::AddRow(a, v), out))
    }

    pub fn mul_row(&mut self, a: VarId, v: VarId) -> Result<VarId> {
        let out = self.value(a).mul_row(self.value(v))?;
        Ok(self.record(Op::MulRow(a, v), out))
    }

    pub fn softmax_lastdim(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).softmax_lastdim()?;
        Ok(self.record(Op::SoftmaxLastDim(a), v))
    }

    pub fn layer_norm(&mut self, a: VarId, eps: f64) -> Result<VarId> {
        let v = self.value(a).layer_norm(eps)?;
        Ok(self.record(Op::LayerNorm(a, eps), v))
    }

    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).gelu()?;
        Ok(self.record(Op::Gelu(a), v))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.record(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.record(Op::SliceRows(a, start), v))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&id| self.value(id)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        Ok(self.record(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.record(Op::SliceCols(a, start), v))
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let v = Tensor::scalar(self.value(a).sum_all());
        if !v.all_finite() {
            return Err(Error::NonFinite { op: "sum_all" });
        }
        Ok(self.record(Op::SumAll(a), v))
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let v = Tensor::scalar(self.value(a).mean_all());
        if !v.all_finite() {
            return Err(Error::NonFinite { op: "mean_all" });
        }
        Ok(self.record(Op::MeanAll(a), v))
    }

    /// Mean squared error between two same-shape values, as a scalar node.
    pub fn mse(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns the gradient for every
    /// parameter leaf on the tape (zero if the loss does not reach it).
    pub fn backward(&mut self, loss: VarId) -> Result<BTreeMap<VarId, Tensor>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    // dA = dC·Bᵀ ; dB = Aᵀ·dC
                    let (m, _) = self.nodes[id].value.rows_cols();
                    let k = self.nodes[a].value.shape()[1];
                    let n = self.nodes[b].value.shape()[1];
                    let dc = Tensor::new(vec![m, n], g)?;
                    let da = dc.matmul(&self.nodes[b].value.transpose()?)?;
                    let db = self.nodes[a].value.transpose()?.matmul(&dc)?;
                    debug_assert_eq!(da.shape(), &[m, k]);
                    accumulate(&mut grads, a, da.data());
                    accumulate(&mut grads, b, db.data());
                }
                Op::Transpose(a) => {
                    let (r, c) = self.nodes[id].value.rows_cols();
                    let dc = Tensor::new(vec![r, c], g)?;
                    accumulate(&mut grads, a, dc.transpose()?.data());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, &g);
                    accumulate(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(self.nodes[b].value.data()).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> =
                        g.iter().zip(self.nodes[a].value.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, a, &g);
                }
                Op::AddRow(a, v) => {
                    accumulate(&mut grads, a, &g);
                    let (rows, cols) = self.nodes[a].value.rows_cols();
                    let mut dv = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dv[j] += g[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, v, &dv);
                }
                Op::MulRow(a, v) => {
                    let (rows, cols) = self.nodes[a].value.rows_cols();
                    let av = &self.nodes[a].value;
                    let vv = &self.nodes[v].value;
                    let mut da = vec![0.0; rows * cols];
                    let mut dv = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[i * cols + j] = g[i * cols + j] * vv.data()[j];
                            dv[j] += g[i * cols + j] * av.data()[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, v, &dv);
                }
                Op::SoftmaxLastDim(a) => {
                    // dX = P ⊙ (dY − ⟨dY, P⟩ per row)
                    let p = &self.nodes[id].value;
                    let (rows, cols) = p.rows_cols();
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let pr = &p.data()[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            da[i * cols + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, a, &da);
                }
                Op::LayerNorm(a, eps) => {
                    let x = &self.nodes[a].value;
                    let xhat = &self.nodes[id].value;
                    let (rows, cols) = x.rows_cols();
                    let n = cols as f64;
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let xr = &x.data()[i * cols..(i + 1) * cols];
                        let hr = &xhat.data()[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let mean: f64 = xr.iter().sum::<f64>() / n;
                        let var: f64 = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean: f64 = gr.iter().sum::<f64>() / n;
                        let gh_mean: f64 = gr.iter().zip(hr).map(|(x, y)| x * y).sum::<f64>() / n;
                        for j in 0..cols {
                            da[i * cols + j] = inv * (gr[j] - g_mean - hr[j] * gh_mean);
                        }
                    }
                    accumulate(&mut grads, a, &da);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| gi * gelu_grad_scalar(xi))
                        .collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for pid in parts {
                        let len = self.nodes[pid].value.numel();
                        accumulate(&mut grads, pid, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (_, cols) = self.nodes[a].value.rows_cols();
                    let mut da = vec![0.0; self.nodes[a].value.numel()];
                    da[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, a, &da);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total_cols) = self.nodes[id].value.rows_cols();
                    let mut offset = 0;
                    for pid in parts {
                        let (_, c) = self.nodes[pid].value.rows_cols();
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c].copy_from_slice(
                                &g[i * total_cols + offset..i * total_cols + offset + c],
                            );
                        }
                        accumulate(&mut grads, pid, &dp);
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.nodes[a].value.rows_cols();
                    let len = self.nodes[id].value.rows_cols().1;
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        da[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; self.nodes[a].value.numel()];
                    accumulate(&mut grads, a, &da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a].value.numel() as f64;
                    let da = vec![g[0] / n; self.nodes[a].value.numel()];
                    accumulate(&mut grads, a, &da);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.param {
                let data = match grads[id].take() {
                    Some(g) => g,
                    None => vec![0.0; node.value.numel()],
                };
                out.insert(id, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: VarId, delta: &[f64]) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => grads[id] = Some(delta.to_vec()),
    }
}
