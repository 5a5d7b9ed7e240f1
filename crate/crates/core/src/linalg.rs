//! Small dense linear algebra: a row-major matrix and a Cholesky factor with
//! jitter escalation.

use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} is {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not positive definite even with jitter {jitter}")]
    JitterExhausted { jitter: f64 },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "vector length");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Principal submatrix on `idx` (rows and columns).
    pub fn select(&self, idx: &[usize]) -> Self {
        Self::from_fn(idx.len(), idx.len(), |i, j| self[(idx[i], idx[j])])
    }

    pub fn add_diagonal(&mut self, d: &[T]) {
        for (i, &x) in d.iter().enumerate() {
            self[(i, i)] += x;
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Diagonal jitter schedule, relative to the mean diagonal of the matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy<T> {
    pub initial: T,
    pub factor: T,
    pub max: T,
}

impl<T: Scalar> Default for JitterPolicy<T> {
    fn default() -> Self {
        Self {
            initial: T::lit(1e-10),
            factor: T::lit(10.0),
            max: T::lit(1e-4),
        }
    }
}

/// Lower-triangular `L` with `L Lᵀ = A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky<T> {
    l: Matrix<T>,
    jitter: T,
}

impl<T: Scalar> Cholesky<T> {
    /// Factorizes `a` exactly as given.
    pub fn new(a: &Matrix<T>) -> Result<Self, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::NotSquare {
                rows: a.rows,
                cols: a.cols,
            });
        }
        let n = a.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let (done, rest) = l.data.split_at_mut(j * n);
            let row_j = &mut rest[..n];
            for k in 0..j {
                let row_k = &done[k * n..k * n + n];
                let s = a[(j, k)] - dot(&row_j[..k], &row_k[..k]);
                row_j[k] = s / row_k[k];
            }
            let d = a[(j, j)] - dot(&row_j[..j], &row_j[..j]);
            if !(d > T::zero()) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    pivot: j,
                    value: d.to_f64_lossy(),
                });
            }
            row_j[j] = d.sqrt();
        }
        Ok(Self { l, jitter: T::zero() })
    }

    /// Tries `a` unchanged, then adds `policy.initial · mean(diag a)` to the
    /// diagonal, growing it by `policy.factor` until `policy.max` is passed.
    pub fn with_jitter(a: &Matrix<T>, policy: &JitterPolicy<T>) -> Result<Self, LinalgError> {
        match Self::new(a) {
            Ok(c) => return Ok(c),
            Err(e @ LinalgError::NotSquare { .. }) => return Err(e),
            Err(_) => {}
        }
        let n = a.rows;
        let mean_diag = if n == 0 {
            T::one()
        } else {
            a.diagonal().into_iter().sum::<T>() / T::from_usize_lossy(n)
        };
        let base = if mean_diag > T::zero() { mean_diag } else { T::one() };
        let mut rel = policy.initial;
        while rel <= policy.max * (T::one() + T::epsilon()) {
            let jitter = rel * base;
            let mut aj = a.clone();
            aj.add_diagonal(&vec![jitter; n]);
            if let Ok(mut c) = Self::new(&aj) {
                c.jitter = jitter;
                return Ok(c);
            }
            rel *= policy.factor;
        }
        Err(LinalgError::JitterExhausted {
            jitter: (policy.max * base).to_f64_lossy(),
        })
    }

    pub fn l(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Diagonal jitter that was added before factorizing.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// Solves `L z = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        assert_eq!(b.len(), n, "right-hand side length");
        for i in 0..n {
            let row = self.l.row(i);
            let s = b[i] - dot(&row[..i], &b[..i]);
            b[i] = s / row[i];
        }
    }

    /// Solves `Lᵀ z = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut [T]) {
        let n = self.dim();
        assert_eq!(b.len(), n, "right-hand side length");
        for i in (0..n).rev() {
            b[i] /= self.l[(i, i)];
            let bi = b[i];
            let row = self.l.row(i);
            for k in 0..i {
                b[k] -= row[k] * bi;
            }
        }
    }

    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let mut z = b.to_vec();
        self.solve_lower_in_place(&mut z);
        z
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut z = b.to_vec();
        self.solve_lower_in_place(&mut z);
        self.solve_upper_in_place(&mut z);
        z
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // Symmetrize against rounding.
        for i in 0..n {
            for j in 0..i {
                let m = (inv[(i, j)] + inv[(j, i)]) * T::lit(0.5);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        inv
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> T {
        T::lit(2.0) * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<T>()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.l.matmul(&self.l.transpose())
    }
}
