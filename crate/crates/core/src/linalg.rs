//! Dense row-major matrices and a one-sided Jacobi SVD.
//!
//! Sized for desk-scale work (a few hundred rows/cols). Everything is f64 and
//! single threaded so results are bit-reproducible for identical inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of Jacobi sweeps before the SVD gives up.
pub const MAX_SWEEPS: usize = 60;

/// A pair of columns is considered orthogonal once
/// `|<c_i, c_j>| <= JACOBI_TOL * |c_i| * |c_j|`.
pub const JACOBI_TOL: f64 = 1e-12;

/// Singular values below this fraction of the largest one get a completed
/// (Gram–Schmidt) left singular vector instead of a normalized residual.
const NULL_SPACE_RTOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense 2-D array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::new(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin SVD `A = U diag(sigma) Vᵀ` with `k = min(rows, cols)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    /// Number of retained components.
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.rank();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u.get(i, j) * self.sigma[j]);
        us.matmul(&self.vt).expect("svd factors chain by construction")
    }

    pub fn truncate(&self, r: usize) -> Result<SvdResult> {
        truncate_svd(self, r)
    }

    /// Frobenius norm of the discarded spectrum, `sqrt(sum_{k>r} sigma_k^2)`.
    pub fn tail_norm(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Keeps the leading `r` singular triplets.
pub fn truncate_svd(s: &SvdResult, r: usize) -> Result<SvdResult> {
    let max = s.rank();
    if r == 0 || r > max {
        return Err(LinalgError::RankOutOfRange { rank: r, max });
    }
    let u = Matrix::from_fn(s.u.rows(), r, |i, j| s.u.get(i, j));
    let vt = Matrix::from_fn(r, s.vt.cols(), |i, j| s.vt.get(i, j));
    Ok(SvdResult {
        u,
        sigma: s.sigma[..r].to_vec(),
        vt,
    })
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns are rotated pairwise in fixed `(i, j)` order until every pair is
/// orthogonal to `JACOBI_TOL`. Singular values come out in non-increasing
/// order (stable with respect to the Jacobi column order) and each column of
/// `u` has its largest-magnitude entry non-negative.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if let Some(idx) = a.data.iter().position(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite {
            row: idx / a.cols,
            col: idx % a.cols,
        });
    }
    let transposed = a.rows < a.cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = work.shape();

    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0_f64;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0;
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(cosine);
                if cosine <= JACOBI_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + 1f64.hypot(zeta))
                };
                let c = 1.0 / 1f64.hypot(t);
                let s = c * t;
                rotate_pair(&mut cols, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NotConverged {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let sigma_max = norms[order[0]];

    // Left vectors (length m) in sorted order, with basis completion for
    // numerically null directions.
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for &idx in &order {
        let s = norms[idx];
        let col = if s > 0.0 && s > NULL_SPACE_RTOL * sigma_max {
            cols[idx].iter().map(|x| x / s).collect()
        } else {
            complete_basis(&left, m)
        };
        left.push(col);
        sigma.push(s);
    }
    let right: Vec<Vec<f64>> = order.iter().map(|&idx| v[idx].clone()).collect();

    // Un-transpose: for Aᵀ = L Σ Rᵀ we have A = R Σ Lᵀ.
    let (mut u_cols, mut vt_rows) = if transposed { (right, left) } else { (left, right) };
    for (u_col, vt_row) in u_cols.iter_mut().zip(vt_rows.iter_mut()) {
        let pivot = u_col
            .iter()
            .enumerate()
            .fold(
                (0, 0.0_f64),
                |best, (i, x)| if x.abs() > best.1 { (i, x.abs()) } else { best },
            )
            .0;
        if u_col[pivot] < 0.0 {
            u_col.iter_mut().for_each(|x| *x = -*x);
            vt_row.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let k = n;
    let u = Matrix::from_fn(a.rows, k, |i, j| u_cols[j][i]);
    let vt = Matrix::from_fn(k, a.cols, |i, j| vt_rows[i][j]);
    Ok(SvdResult { u, sigma, vt })
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// First standard basis vector (after two rounds of modified Gram–Schmidt)
/// that keeps a substantial component orthogonal to `basis`.
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for k in 0..m {
        let mut w = vec![0.0; m];
        w[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = norm2(&w);
        if norm > 0.5 {
            w.iter_mut().for_each(|x| *x /= norm);
            return w;
        }
    }
    unreachable!("fewer than m orthonormal vectors always admit a completion")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(Matrix::new(0, 2, vec![]), Err(LinalgError::EmptyShape { .. })));
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(LinalgError::DataLength { got: 3, .. })
        ));
        assert_eq!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { row: 0, col: 1 })
        );
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);

        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let expect = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), expect);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            LinalgError::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn frobenius_small_cases() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[&[3.0, 4.0]]).unwrap()), 5.0);
        assert_eq!(frobenius_norm(&Matrix::diag(&[1.0, 2.0, 2.0])), 3.0);
    }

    #[test]
    fn svd_diagonal_and_permutation() {
        let s = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 1.0]);

        let p = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let s = svd(&p).unwrap();
        assert_close(s.sigma[0], 1.0, 1e-15);
        assert_close(s.sigma[1], 1.0, 1e-15);
        assert!(frobenius_norm(&s.reconstruct().sub(&p).unwrap()) < 1e-14);
    }

    #[test]
    fn svd_of_zero_matrix_is_orthonormal() {
        let s = svd(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(s.sigma, vec![0.0; 3]);
        let utu = s.u.transpose().matmul(&s.u).unwrap();
        assert_eq!(utu, Matrix::identity(3));
    }

    #[test]
    fn svd_of_wide_matrix() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let s = svd(&a).unwrap();
        assert_eq!(s.u.shape(), (2, 2));
        assert_eq!(s.vt.shape(), (2, 3));
        assert!(frobenius_norm(&s.reconstruct().sub(&a).unwrap()) < 1e-13);
    }

    #[test]
    fn sign_convention_largest_entry_non_negative() {
        let a = Matrix::from_rows(&[&[-5.0, 0.0], &[0.0, -1.0], &[0.0, 0.0]]).unwrap();
        let s = svd(&a).unwrap();
        for j in 0..s.rank() {
            let col = s.u.column(j);
            let max = col
                .iter()
                .cloned()
                .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max >= 0.0);
        }
        assert!(frobenius_norm(&s.reconstruct().sub(&a).unwrap()) < 1e-14);
    }

    #[test]
    fn truncate_diag_leaves_remaining_value() {
        let a = Matrix::diag(&[3.0, 1.0]);
        let t = truncate_svd(&svd(&a).unwrap(), 1).unwrap();
        assert_eq!(t.sigma, vec![3.0]);
        assert_close(frobenius_norm(&a.sub(&t.reconstruct()).unwrap()), 1.0, 1e-15);
    }

    #[test]
    fn truncate_rank_bounds() {
        let s = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(
            truncate_svd(&s, 0),
            Err(LinalgError::RankOutOfRange { rank: 0, max: 2 })
        );
        assert_eq!(
            truncate_svd(&s, 3),
            Err(LinalgError::RankOutOfRange { rank: 3, max: 2 })
        );
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m.data[3] = f64::INFINITY;
        assert_eq!(svd(&m), Err(LinalgError::NonFinite { row: 1, col: 1 }));
    }
}
