//! Dense row-major `f64` tensors and the value-level kernels behind the
//! differentiable ops in [`crate::tape`].
//!
//! Everything is plain CPU arithmetic with a fixed, documented summation
//! order (ascending index per output element), so results are bit-identical
//! run to run regardless of available parallelism.

use crate::error::{Error, Result};

/// Additive attention-bias value standing in for log(0).
///
/// Finite on purpose: IEEE `-inf` turns into NaN under the max-subtraction
/// in [`Tensor::softmax_lastdim`] when a whole row is masked. `exp(x)` for
/// any `x <= -1e30 + O(1e3)` underflows to exactly `0.0` in f64, so masked
/// positions contribute nothing to the softmax.
pub const MASK_SENTINEL: f64 = -1.0e30;

/// Rows whose maximum logit is at or below this are treated as fully masked.
const FULLY_MASKED_THRESHOLD: f64 = MASK_SENTINEL * 0.5;

/// Dense tensor: shape plus row-major `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Mark this tensor as a gradient target when placed on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape("item", format!("expected scalar, got {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Rows/cols view: the last extent is the column count, everything
    /// before it is flattened into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&0);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        (rows, cols)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-d tensor, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if !self.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(self)
    }

    // ── Kernels ──────────────────────────────────────────────────────

    /// Dense product `[m×k]·[k×n] -> [m×n]`.
    ///
    /// Each output element accumulates its k terms in ascending-index
    /// order, so the result does not depend on thread count.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)?.check_finite("matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    fn zip_elementwise(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("operands differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(self.shape.clone(), data)?.check_finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_elementwise(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| v * c).collect();
        Tensor::new(self.shape.clone(), data)?.check_finite("scale")
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| v + c).collect();
        Tensor::new(self.shape.clone(), data)?.check_finite("add_scalar")
    }

    /// Broadcast-add a length-`cols` vector to every row.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if v.numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("vector of {} does not match {} columns", v.numel(), cols),
            ));
        }
        let mut out = self.data.clone();
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] += v.data[j];
            }
        }
        Tensor::new(self.shape.clone(), out)?.check_finite("add_row")
    }

    /// Broadcast-multiply every row by a length-`cols` vector.
    pub fn mul_row(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if v.numel() != cols {
            return Err(Error::shape(
                "mul_row",
                format!("vector of {} does not match {} columns", v.numel(), cols),
            ));
        }
        let mut out = self.data.clone();
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] *= v.data[j];
            }
        }
        Tensor::new(self.shape.clone(), out)?.check_finite("mul_row")
    }

    /// Numerically stable row softmax over the last dimension.
    ///
    /// Rows that are fully masked (every logit at or below the sentinel,
    /// including `-inf`) are defined to return all zeros rather than NaN.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if cols == 0 {
            return Err(Error::shape("softmax_lastdim", "empty last dimension"));
        }
        let mut out = vec![0.0; self.data.len()];
        for i in 0..rows {
            let row = &self.data[i * cols..(i + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if max.is_nan() {
                return Err(Error::NonFinite { op: "softmax_lastdim" });
            }
            let o_row = &mut out[i * cols..(i + 1) * cols];
            if max <= FULLY_MASKED_THRESHOLD {
                continue; // fully masked row stays all-zero
            }
            let mut sum = 0.0;
            for (o, &v) in o_row.iter_mut().zip(row) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in o_row.iter_mut() {
                *o /= sum;
            }
        }
        Tensor::new(self.shape.clone(), out)?.check_finite("softmax_lastdim")
    }

    /// Per-row standardization over the last dimension: zero mean, unit
    /// variance up to the `eps` correction. No affine part; modulation is
    /// applied by the caller.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if cols < 2 {
            return Err(Error::shape("layer_norm", "last dimension must be >= 2"));
        }
        let mut out = vec![0.0; self.data.len()];
        for i in 0..rows {
            let row = &self.data[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        Tensor::new(self.shape.clone(), out)?.check_finite("layer_norm")
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| gelu_scalar(x)).collect();
        Tensor::new(self.shape.clone(), data)?.check_finite("gelu")
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum_all() / self.data.len() as f64
    }

    /// Stack tensors with identical column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = parts[0].rows_cols().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.rows_cols();
            if c != cols {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if start + len > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} out of {}", start, start + len, rows),
            ));
        }
        let data = self.data[start * cols..(start + len) * cols].to_vec();
        Tensor::new(vec![len, cols], data)
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = parts[0].rows_cols().0;
        let total_cols: usize = parts
            .iter()
            .map(|p| p.rows_cols().1)
            .sum();
        if parts.iter().any(|p| p.rows_cols().0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for p in parts {
            let (_, c) = p.rows_cols();
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(&p.data[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Tensor::new(vec![rows, total_cols], data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} out of {}", start, start + len, cols),
            ));
        }
        let mut data = vec![0.0; rows * len];
        for i in 0..rows {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.data[i * cols + start..i * cols + start + len]);
        }
        Tensor::new(vec![rows, len], data)
    }

    /// Reinterpret the same data under a new shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044_715 * x * x)
}
