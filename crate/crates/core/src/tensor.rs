//! Dense row-major `f64` matrices.
//!
//! Everything on the training path is a 2-D matrix; scalars are `1×1` and
//! vectors are single rows. The kernels here are shared by the autodiff tape
//! and the packed inference path so both produce identical floating-point
//! results for the full-precision pieces (layer norm, residuals, heads).

use crate::error::{shape_err, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a `1×1` matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return shape_err(format!("matmul {:?} x {:?}", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = self.row(i);
            let o = &mut out[i * n..(i + 1) * n];
            for (l, &av) in a.iter().enumerate().take(k) {
                if av == 0.0 {
                    continue;
                }
                let b = other.row(l);
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return shape_err(format!(
                "matmul_t {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            ));
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.push(dot(a, other.row(j)));
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return shape_err(format!(
                "t_matmul {:?}ᵀ x {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for l in 0..self.rows {
            let a = self.row(l);
            let b = other.row(l);
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return shape_err(format!("add_row {:?} + {:?}", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a `1×cols` row.
    pub fn mul_row(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return shape_err(format!("mul_row {:?} * {:?}", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, g) in out.row_mut(i).iter_mut().zip(&row.data) {
                *v *= g;
            }
        }
        Ok(out)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return shape_err(format!("column slice {start}..{end} of {}", self.cols));
        }
        Ok(Self::from_fn(self.rows, end - start, |i, j| {
            self.get(i, start + j)
        }))
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return shape_err("concat_rows: column counts differ");
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return shape_err(format!("row {i} out of {}", self.rows));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
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
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Normalizes each row to zero mean / unit variance. Returns the normalized
/// rows and each row's inverse standard deviation.
pub fn layer_norm_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    let n = x.cols() as f64;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let b = Matrix::from_fn(4, 2, |i, j| (i as f64) * 0.5 - j as f64);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, a.matmul_t(&b.transpose()).unwrap());
        assert_eq!(ab, a.transpose().t_matmul(&b).unwrap());
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::zeros(2, 3);
        assert!(a.matmul(&a).is_err());
        assert!(a.add(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Matrix::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 0.7);
        let s = softmax_rows(&x);
        for i in 0..3 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rows_standardize() {
        let x = Matrix::from_fn(2, 6, |i, j| (i + 1) as f64 * j as f64);
        let (y, _) = layer_norm_rows(&x, LAYER_NORM_EPS);
        for i in 0..2 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 6.0;
            let var = r.iter().map(|v| v * v).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-2.0, -0.3, 0.0, 0.4, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
