//! Dense row-major `f64` matrices and the kernels the aggregation code uses.

mod svd;
pub mod track;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use svd::{thin_svd, SvdFactors, MAX_SWEEPS};

/// Row-major dense matrix with finite entries.
#[derive(PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(mut m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: std::mem::take(&mut m.data),
        }
    }
}

impl Drop for Matrix {
    fn drop(&mut self) {
        track::on_free(self.data.len());
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        Self::wrap(self.rows, self.cols, self.data.clone())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    fn wrap(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        track::on_alloc(data.len());
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionInconsistency(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec(rows.len(), cols, data).expect("finite literal")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::wrap(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::wrap(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Product `self · rhs`. Charges `2·m·k·n` FLOPs.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        if m > 0 && k > 0 && n > 0 {
            // SAFETY: both operands and `out` are dense row-major buffers of
            // exactly m·k, k·n and m·n elements with the strides given.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    k as isize,
                    1,
                    rhs.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        track::charge(track::matmul_flops(m, k, n));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "matmul" });
        }
        Ok(Self::wrap(m, n, out))
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let data: Vec<f64> = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self::wrap(self.rows, self.cols, data))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// In-place `self += alpha · rhs`.
    pub fn axpy(&mut self, alpha: f64, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "axpy" });
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Self::wrap(self.rows, self.cols, self.data.iter().map(|&v| alpha * v).collect())
    }

    /// `diag(factors) · self`, charging one FLOP per entry.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: (factors.len(), factors.len()),
                right: self.shape(),
            });
        }
        let mut out = self.data.clone();
        for (row, &f) in out.chunks_mut(self.cols.max(1)).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        track::charge(self.len() as u64);
        Ok(Self::wrap(self.rows, self.cols, out))
    }

    /// `self · diag(factors)`, charging one FLOP per entry.
    pub fn scale_cols(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "scale_cols",
                left: self.shape(),
                right: (factors.len(), factors.len()),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols.max(1)) {
            row.iter_mut().zip(factors).for_each(|(v, &f)| *v *= f);
        }
        track::charge(self.len() as u64);
        Ok(Self::wrap(self.rows, self.cols, out))
    }

    pub fn select_cols(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.cols, "column range out of bounds");
        let width = range.len();
        Self::from_fn(self.rows, width, |i, j| self.get(i, range.start + j))
    }

    pub fn select_rows(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.rows, "row range out of bounds");
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Self::wrap(range.len(), self.cols, data)
    }

    /// Concatenates column blocks `[M₁ | M₂ | …]`.
    pub fn hcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::ShapeMismatch {
                op: "hcat",
                left: blocks[0].shape(),
                right: bad.shape(),
            });
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Self::wrap(rows, cols, data))
    }

    /// Concatenates row blocks vertically.
    pub fn vcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if let Some(bad) = blocks.iter().find(|b| b.cols != cols) {
            return Err(Error::ShapeMismatch {
                op: "vcat",
                left: blocks[0].shape(),
                right: bad.shape(),
            });
        }
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Self::wrap(rows, cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

/// `sqrt(Σ a_ij²)`.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}
