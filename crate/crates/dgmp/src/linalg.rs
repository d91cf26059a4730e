//! Minimal dense linear algebra: Gram matrices, symmetric positive definite
//! solves via Cholesky, and the handful of products the rest of the crate needs.
//!
//! Everything is `f64` and all reductions run in a fixed sequential order so
//! results are bit-reproducible across runs.

use std::cell::Cell;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("non-finite value at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },
    #[error("empty dimension: rows and cols must be at least 1")]
    Empty,
}

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
    static SOLVES: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread counts of (Cholesky factorizations, triangular solves) performed
/// so far. Used by tests to assert how much work an adjoint really does.
pub fn solver_stats() -> (u64, u64) {
    (FACTORIZATIONS.with(Cell::get), SOLVES.with(Cell::get))
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from externally supplied row-major data, validating
    /// shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                context: "matrix data length",
                left: data.len(),
                right: rows * cols,
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self { rows, cols, data })
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
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from a slice of rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        if rows.is_empty() {
            return Err(LinalgError::Empty);
        }
        let cols = rows[0].len();
        for row in rows {
            if row.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    context: "row length",
                    left: row.len(),
                    right: cols,
                });
            }
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vector {
        Vector::from_iter((0..self.rows).map(|r| self.get(r, c)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Adds `v` to every diagonal entry (square matrices only).
    pub fn add_diagonal(&mut self, v: f64) {
        debug_assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            let cur = self.get(i, i);
            self.set(i, i, cur + v);
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                context: "matrix add",
                left: self.data.len(),
                right: other.data.len(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// Dense `f64` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Builds a vector from external data, validating finiteness.
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn ones(dim: usize) -> Self {
        Self {
            data: vec![1.0; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let mut acc = 0.0;
        for i in 0..self.data.len() {
            acc += self.data[i] * other.data[i];
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.dim(), other.dim());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self {
            data: iter.into_iter().collect(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Gram matrix `K = AᵀA` of the columns of `a`.
///
/// Only the upper triangle is computed; the lower triangle is mirrored, so the
/// result is symmetric bit-for-bit.
pub fn gram(a: &Matrix) -> Matrix {
    let n = a.cols();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for d in 0..a.rows() {
                acc += a.get(d, i) * a.get(d, j);
            }
            k.set(i, j, acc);
            k.set(j, i, acc);
        }
    }
    k
}

/// Matrix-vector product with sequential accumulation over the inner dimension.
pub fn matvec(a: &Matrix, v: &Vector) -> Result<Vector, LinalgError> {
    if a.cols() != v.dim() {
        return Err(LinalgError::DimensionMismatch {
            context: "matvec",
            left: a.cols(),
            right: v.dim(),
        });
    }
    let mut out = Vector::zeros(a.rows());
    for r in 0..a.rows() {
        let mut acc = 0.0;
        for c in 0..a.cols() {
            acc += a.get(r, c) * v[c];
        }
        out[r] = acc;
    }
    Ok(out)
}

/// Matrix product with sequential accumulation over the inner dimension.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols() != b.rows() {
        return Err(LinalgError::DimensionMismatch {
            context: "matmul",
            left: a.cols(),
            right: b.rows(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Outer product `u vᵀ`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    Matrix::from_fn(u.dim(), v.dim(), |r, c| u[r] * v[c])
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// The factorization is done once; any number of right-hand sides can then be
/// solved against it.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: Matrix,
    /// Jitter added to the diagonal before the factorization succeeded (0 when
    /// the first attempt worked).
    pub jitter: f64,
}

impl CholeskyFactor {
    /// Factorizes `a`, which must be symmetric up to a relative asymmetry of
    /// 1e-10 (it is then symmetrized). If the factorization fails, one retry
    /// is made after adding `1e-10 * trace(a) / n` to the diagonal.
    pub fn new(a: &Matrix) -> Result<Self, LinalgError> {
        if a.rows() != a.cols() {
            return Err(LinalgError::DimensionMismatch {
                context: "cholesky (square required)",
                left: a.rows(),
                right: a.cols(),
            });
        }
        let n = a.rows();
        let mut max_abs = 0.0f64;
        let mut max_asym = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                max_abs = max_abs.max(a.get(i, j).abs());
                if j > i {
                    max_asym = max_asym.max((a.get(i, j) - a.get(j, i)).abs());
                }
            }
        }
        if max_asym > 1e-10 * max_abs.max(1.0) {
            return Err(LinalgError::NotSymmetric {
                max_asymmetry: max_asym,
            });
        }
        let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));

        match Self::factorize(&sym) {
            Ok(l) => Ok(Self { l, jitter: 0.0 }),
            Err(_) => {
                let trace: f64 = (0..n).map(|i| sym.get(i, i)).sum();
                let jitter = 1e-10 * trace / n as f64;
                let mut retry = sym;
                retry.add_diagonal(jitter);
                let l = Self::factorize(&retry)?;
                Ok(Self { l, jitter })
            }
        }
    }

    fn factorize(a: &Matrix) -> Result<Matrix, LinalgError> {
        FACTORIZATIONS.with(|c| c.set(c.get() + 1));
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a.get(j, j);
            for k in 0..j {
                diag -= l.get(j, k) * l.get(j, k);
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: diag,
                    index: j,
                });
            }
            let ljj = diag.sqrt();
            l.set(j, j, ljj);
            for i in (j + 1)..n {
                let mut acc = a.get(i, j);
                for k in 0..j {
                    acc -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, acc / ljj);
            }
        }
        Ok(l)
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `a x = b` using the stored factor (forward then back substitution).
    pub fn solve(&self, b: &Vector) -> Result<Vector, LinalgError> {
        let n = self.l.rows();
        if b.dim() != n {
            return Err(LinalgError::DimensionMismatch {
                context: "cholesky solve",
                left: b.dim(),
                right: n,
            });
        }
        SOLVES.with(|c| c.set(c.get() + 1));
        // L y = b
        let mut y = Vector::zeros(n);
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l.get(i, k) * y[k];
            }
            y[i] = acc / self.l.get(i, i);
        }
        // Lᵀ x = y
        let mut x = Vector::zeros(n);
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= self.l.get(k, i) * x[k];
            }
            x[i] = acc / self.l.get(i, i);
        }
        Ok(x)
    }
}

/// One-shot symmetric positive definite solve: factorize `a` and solve for `b`.
pub fn spd_solve(a: &Matrix, b: &Vector) -> Result<Vector, LinalgError> {
    if a.rows() != b.dim() {
        return Err(LinalgError::DimensionMismatch {
            context: "spd_solve",
            left: a.rows(),
            right: b.dim(),
        });
    }
    CholeskyFactor::new(a)?.solve(b)
}
