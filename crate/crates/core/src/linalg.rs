//! Sparse storage and the two SPD solvers used by the dual map and the Newton steps.

use thiserror::Error;

use crate::scalar::{dot, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("conjugate gradients did not reach tolerance {tol:e} in {iterations} iterations (residual {residual:e})")]
    CgDiverged {
        iterations: usize,
        residual: f64,
        tol: f64,
    },
}

/// Square matrix in compressed sparse row form with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds an `n x n` matrix, summing duplicate entries in input order.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut sorted: Vec<(usize, usize, T)> = triplets.to_vec();
        // stable sort keeps the summation order of duplicates deterministic
        sorted.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            assert!(i < n && j < n, "triplet ({i}, {j}) outside {n} x {n}");
            if last == Some((i, j)) {
                let top = values.len() - 1;
                values[top] = values[top] + v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// All stored entries as `(row, col, value)`, row-major.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => T::zero(),
        }
    }

    pub fn mul_vec_into(&self, x: &[T], y: &mut [T]) {
        debug_assert!(x.len() == self.n && y.len() == self.n);
        for (i, out) in y.iter_mut().enumerate() {
            *out = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `x^T A y`
    pub fn bilinear(&self, x: &[T], y: &[T]) -> T {
        (0..self.n)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<T>())
            .sum()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        self.entries().map(|(i, j, _)| i.abs_diff(j)).max().unwrap_or(0)
    }
}

/// Cholesky factor of a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky<T> {
    n: usize,
    band: usize,
    // row i holds L[i][i - band ..= i], left-padded
    lower: Vec<T>,
}

impl<T: Scalar> BandedCholesky<T> {
    /// Factors the matrix whose entry `(i, j)` is
    /// `A_ij` if both nodes are active, `A_ii + shift_i` on active diagonals,
    /// and the identity on inactive rows and columns.
    pub fn factor_masked(
        a: &CsrMatrix<T>,
        band: usize,
        active: &[bool],
        shift: &[T],
    ) -> Result<Self, LinalgError> {
        let n = a.dim();
        let width = band + 1;
        let mut lower = vec![T::zero(); n * width];
        for i in 0..n {
            if !active[i] {
                lower[i * width + band] = T::one();
                continue;
            }
            for (j, v) in a.row(i) {
                if j <= i && active[j] {
                    debug_assert!(i - j <= band, "entry outside the declared band");
                    lower[i * width + band - (i - j)] = v;
                }
            }
            lower[i * width + band] = lower[i * width + band] + shift[i];
        }
        for i in 0..n {
            let start = i.saturating_sub(band);
            for j in start..=i {
                let kmin = start.max(j.saturating_sub(band));
                let mut s = lower[i * width + band - (i - j)];
                for k in kmin..j {
                    s = s - lower[i * width + band - (i - k)] * lower[j * width + band - (j - k)];
                }
                if i == j {
                    if !(s > T::zero()) {
                        return Err(LinalgError::NotPositiveDefinite {
                            row: i,
                            pivot: s.to_f64().unwrap_or(f64::NAN),
                        });
                    }
                    lower[i * width + band] = s.sqrt();
                } else {
                    lower[i * width + band - (i - j)] = s / lower[j * width + band];
                }
            }
        }
        Ok(Self { n, band, lower })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, x: &mut [T]) {
        let (n, band, width) = (self.n, self.band, self.band + 1);
        for i in 0..n {
            let start = i.saturating_sub(band);
            let mut s = x[i];
            for k in start..i {
                s = s - self.lower[i * width + band - (i - k)] * x[k];
            }
            x[i] = s / self.lower[i * width + band];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + band + 1).min(n) {
                s = s - self.lower[k * width + band - (k - i)] * x[k];
            }
            x[i] = s / self.lower[i * width + band];
        }
    }
}

/// Jacobi-preconditioned conjugate gradients on `A x = b` with every iterate
/// kept in the range of `deflate` (used to stay orthogonal to a kernel).
///
/// Stops when `|r| <= tol * |b|`. Returns the iteration count.
pub fn pcg_deflated<T: Scalar>(
    a: &CsrMatrix<T>,
    b: &[T],
    x: &mut [T],
    tol: T,
    max_iter: usize,
    deflate: impl Fn(&mut [T]),
) -> Result<usize, LinalgError> {
    let n = a.dim();
    let diag = a.diagonal();
    let inv: Vec<T> = diag
        .iter()
        .map(|&d| if d > T::zero() { T::one() / d } else { T::one() })
        .collect();
    let b_norm = dot(b, b).sqrt();
    if b_norm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return Ok(0);
    }
    deflate(x);
    let mut r = a.mul_vec(x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    deflate(&mut r);
    let mut z: Vec<T> = r.iter().zip(&inv).map(|(&r, &d)| r * d).collect();
    deflate(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![T::zero(); n];
    for it in 0..max_iter {
        if dot(&r, &r).sqrt() <= tol * b_norm {
            return Ok(it);
        }
        a.mul_vec_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
            r[i] = r[i] - alpha * ap[i];
        }
        deflate(&mut r);
        for i in 0..n {
            z[i] = r[i] * inv[i];
        }
        deflate(&mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let residual = dot(&r, &r).sqrt() / b_norm;
    if residual <= tol {
        return Ok(max_iter);
    }
    Err(LinalgError::CgDiverged {
        iterations: max_iter,
        residual: residual.to_f64().unwrap_or(f64::NAN),
        tol: tol.to_f64().unwrap_or(f64::NAN),
    })
}
