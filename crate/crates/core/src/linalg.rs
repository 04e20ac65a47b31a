//! Small dense linear algebra in `f64`: a row-major [`Matrix`], a cyclic Jacobi
//! symmetric eigensolver, a Gram-based thin SVD and a Gram-Schmidt
//! orthonormalizer.
//!
//! Everything here is sized for the analyses in this crate (at most a few
//! hundred rows or columns), so the algorithms favour determinism and
//! robustness over speed.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative off-diagonal Frobenius norm at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-12;
/// Maximum number of cyclic Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Relative asymmetry accepted by [`sym_eigen`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative residual below which a column is treated as linearly dependent.
pub const QR_PIVOT_TOL: f64 = 1e-10;
/// Singular values below `SVD_RANK_RTOL * sigma_max` do not count towards the rank.
///
/// The SVD is built from a Gram matrix, so small singular values carry an
/// absolute error around `sqrt(eps) * sigma_max`.
pub const SVD_RANK_RTOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is empty")]
    Empty,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("jacobi iteration did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    /// Keeps the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        Matrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * self`.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..n {
                    g.data[i * n + j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            axpy(*xi, self.row(i), &mut out);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(factor);
        m
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest entry of `|Q^T Q - I|`; zero for exactly orthonormal columns.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.gram();
        let mut worst: f64 = 0.0;
        for i in 0..g.rows {
            for j in 0..g.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Flips `v` so that its largest-magnitude component is positive.
/// Ties go to the lowest index.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenvalues sorted descending with matching unit eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
    pub sweeps: usize,
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius norm falls below
/// [`JACOBI_TOL`] times the Frobenius norm of the input. Eigenvectors are
/// sign-fixed with [`fix_sign`].
pub fn sym_eigen(a: &Matrix) -> Result<EigenDecomposition> {
    let n = a.rows();
    if n != a.cols() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let scale = a.max_abs();
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if scale > 0.0 && asym > SYMMETRY_TOL * scale {
        return Err(LinalgError::NotSymmetric { asymmetry: asym / scale });
    }

    // Work on the symmetrized copy so tiny asymmetries cannot bias rotations.
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Matrix::identity(n);
    let total = m.frobenius_norm();
    let off_norm = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= JACOBI_TOL * total || total == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NonConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = v.column(i);
        fix_sign(&mut col);
        eigenvectors.set_column(k, &col);
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors, sweeps })
}

/// Applies the rotation `J(p, q, c, s)` as `m <- J^T m J` and `v <- v J`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// `A = U diag(sigma) V^T` with `min(rows, cols)` columns in `U` and `V`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
    pub rank: usize,
}

impl ThinSvd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.v.transpose()).expect("thin svd factors have consistent shapes")
    }
}

/// Thin SVD through the eigendecomposition of the smaller Gram matrix.
///
/// The right (or left, for wide inputs) singular vectors come straight from
/// [`sym_eigen`] and keep its sign convention; the other side is recovered as
/// `A v / sigma` and completed to an orthonormal set where `sigma` is zero.
pub fn thin_svd(a: &Matrix) -> Result<ThinSvd> {
    if a.is_empty() {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if a.rows() < a.cols() {
        let t = thin_svd(&a.transpose())?;
        return Ok(ThinSvd { u: t.v, singular_values: t.singular_values, v: t.u, rank: t.rank });
    }
    let (m, n) = a.shape();
    let eig = sym_eigen(&a.gram())?;
    let singular_values: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let smax = singular_values[0];
    let rank = singular_values.iter().filter(|&&s| s > SVD_RANK_RTOL * smax && s > 0.0).count();

    let v = eig.eigenvectors;
    let mut u = Matrix::zeros(m, n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..rank {
        let mut col = a.matvec(&v.column(j));
        let s = singular_values[j];
        col.iter_mut().for_each(|x| *x /= s);
        // one re-orthogonalization pass against previous columns
        for b in &basis {
            let d = dot(b, &col);
            axpy(-d, b, &mut col);
        }
        let nrm = norm(&col);
        col.iter_mut().for_each(|x| *x /= nrm);
        basis.push(col);
    }
    complete_basis(&mut basis, m, n);
    for (j, col) in basis.iter().enumerate() {
        u.set_column(j, col);
    }
    Ok(ThinSvd { u, singular_values, v, rank })
}

/// Extends an orthonormal set of `m`-vectors to `target` vectors using
/// standard basis candidates.
fn complete_basis(basis: &mut Vec<Vec<f64>>, m: usize, target: usize) {
    let mut e = 0;
    while basis.len() < target && e < m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let d = dot(b, &cand);
                axpy(-d, b, &mut cand);
            }
        }
        let nrm = norm(&cand);
        if nrm > 1e-6 {
            cand.iter_mut().for_each(|x| *x /= nrm);
            basis.push(cand);
        }
    }
}

/// Orthonormal basis of a column space.
#[derive(Debug, Clone)]
pub struct QrBasis {
    pub q: Matrix,
    /// Indices of the input columns that contributed a basis vector.
    pub kept: Vec<usize>,
    pub rank_deficient: bool,
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. A column whose
/// residual falls below [`QR_PIVOT_TOL`] of its original norm is dropped and
/// the result flagged as rank deficient.
pub fn qr_orthonormalize(a: &Matrix) -> Result<QrBasis> {
    if a.is_empty() {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..a.cols() {
        let mut col = a.column(j);
        let orig = norm(&col);
        for _ in 0..2 {
            for b in &basis {
                let d = dot(b, &col);
                axpy(-d, b, &mut col);
            }
        }
        let res = norm(&col);
        if orig == 0.0 || res <= QR_PIVOT_TOL * orig {
            continue;
        }
        col.iter_mut().for_each(|x| *x /= res);
        basis.push(col);
        kept.push(j);
    }
    let mut q = Matrix::zeros(a.rows(), basis.len());
    for (j, b) in basis.iter().enumerate() {
        q.set_column(j, b);
    }
    let rank_deficient = kept.len() < a.cols();
    Ok(QrBasis { q, kept, rank_deficient })
}

/// Principal angles (radians, ascending) between the column spaces of two
/// matrices with orthonormal columns.
///
/// Cosines come from the singular values of `Qa^T Qb`; angles under 45° are
/// taken from the sines (singular values of `Qb - Qa Qa^T Qb`) instead,
/// since `acos` loses about half the digits near zero.
pub fn principal_angles(qa: &Matrix, qb: &Matrix) -> Result<Vec<f64>> {
    if qa.rows() != qb.rows() {
        return Err(LinalgError::Shape(format!(
            "bases live in different spaces ({} vs {})",
            qa.rows(),
            qb.rows()
        )));
    }
    // angles are symmetric; put the larger subspace first so the residual
    // carries one sine per angle
    let (qa, qb) = if qa.cols() >= qb.cols() { (qa, qb) } else { (qb, qa) };
    let cross = qa.transpose().matmul(qb)?;
    let cosines = thin_svd(&cross)?.singular_values;
    let residual = qb.sub(&qa.matmul(&cross)?)?;
    let mut sines = thin_svd(&residual)?.singular_values;
    sines.reverse();
    Ok(cosines
        .iter()
        .zip(&sines)
        .map(|(c, s)| {
            let from_cos = c.clamp(0.0, 1.0).acos();
            if from_cos < std::f64::consts::FRAC_PI_4 {
                s.clamp(0.0, 1.0).asin()
            } else {
                from_cos
            }
        })
        .collect())
}
