//! Minimal dense linear algebra: row-major matrices, matmul, scaled attention
//! scores, stabilized row softmax, causal masking, and cosine similarity.
//!
//! Everything here is pure and operates on `f64`. Matrices are immutable
//! after construction; transposes and slices are explicit copies.

use crate::error::{Error, Result};

/// Sentinel for masked-out attention positions. A large negative finite value
/// rather than -inf so that softmax stabilization never produces inf - inf.
pub const MASK_SENTINEL: f64 = -1e9;

/// Dense row-major matrix of `f64` scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from a flat row-major buffer, validating length and
    /// finiteness of every entry.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                context: "Matrix::from_vec",
                rows,
                cols,
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Matrix::from_vec",
                index: idx,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Build a matrix from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("Matrix::from_rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(
                "Matrix::from_rows: ragged rows".to_string(),
            ));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Internal constructor for results of arithmetic on already-valid inputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Explicit-copy transpose.
    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "col slice out of range");
        let w = end - start;
        let mut out = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            out.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix::from_raw(self.rows, w, out)
    }

    /// Elementwise sum. Shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "add",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    /// Apply `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Vertical concatenation; both matrices must have the same column count.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "vstack",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_raw(self.rows + other.rows, self.cols, data))
    }
}

/// Standard matrix product. Errors on inner-dimension mismatch, naming both
/// shapes.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out_row.iter_mut().zip(b.row(k).iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix::from_raw(a.rows, b.cols, out))
}

/// Row vector times matrix: `row` (1 x n) by `m` (n x p).
pub fn row_times_matrix(row: &[f64], m: &Matrix) -> Result<Vec<f64>> {
    if row.len() != m.rows {
        return Err(Error::DimensionMismatch {
            op: "row_times_matrix",
            left_rows: 1,
            left_cols: row.len(),
            right_rows: m.rows,
            right_cols: m.cols,
        });
    }
    let mut out = vec![0.0; m.cols];
    for (k, &v) in row.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let m_row = m.row(k);
        for j in 0..m.cols {
            out[j] += v * m_row[j];
        }
    }
    Ok(out)
}

/// Attention scores `q * k^T / sqrt(d_k)`. `d_k` is the scaling dimension
/// (the head dimension in attention); `q` and `k` must share a column count.
pub fn scaled_scores(q: &Matrix, k: &Matrix, d_k: usize) -> Result<Matrix> {
    if d_k == 0 {
        return Err(Error::InvalidArgument(
            "scaled_scores: d_k must be at least 1".to_string(),
        ));
    }
    if q.cols != k.cols {
        return Err(Error::DimensionMismatch {
            op: "scaled_scores",
            left_rows: q.rows,
            left_cols: q.cols,
            right_rows: k.rows,
            right_cols: k.cols,
        });
    }
    let inv = 1.0 / (d_k as f64).sqrt();
    let mut out = vec![0.0; q.rows * k.rows];
    for i in 0..q.rows {
        let qi = q.row(i);
        for j in 0..k.rows {
            out[i * k.rows + j] = dot(qi, k.row(j)) * inv;
        }
    }
    Ok(Matrix::from_raw(q.rows, k.rows, out))
}

/// Numerically stabilized softmax applied to each row independently.
/// The per-row maximum is subtracted before exponentiation.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = vec![0.0; a.data.len()];
    for i in 0..a.rows {
        let row = a.row(i);
        let out_row = &mut out[i * a.cols..(i + 1) * a.cols];
        softmax_into(row, out_row);
    }
    Matrix::from_raw(a.rows, a.cols, out)
}

/// Stabilized softmax of one score row into `out`.
pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores.iter()) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Causal mask: zero on and below the diagonal, `MASK_SENTINEL` strictly
/// above it.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data[i * n + j] = MASK_SENTINEL;
        }
    }
    m
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v.iter()) {
        acc += a * b;
    }
    acc
}

pub(crate) fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity of two equal-length vectors. Errors on length mismatch
/// or a zero-norm input.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            op: "cosine_sim",
            left_rows: 1,
            left_cols: u.len(),
            right_rows: 1,
            right_cols: v.len(),
        });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Max relative discrepancy between two equal-length slices. The denominator
/// is floored at 1e-9 so near-zero entries compare absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_relative_error: length mismatch");
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1e-9);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
