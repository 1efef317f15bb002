// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra used by the eraser.
//!
//! Vectors are plain `[f64]` slices. [`Mat`] is a row-major dense matrix.
//! Everything here is 64-bit and allocation-light; nothing is tuned for
//! large problems.
//!
//! The two complement projections are deliberately independent:
//! [`project_complement_basis`] works from an orthonormal basis produced by
//! [`gram_schmidt`], while [`project_complement_inverse`] works from the raw
//! spanning vectors through a pivoted Cholesky solve of the Gram matrix.
//! Each is the other's oracle.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative residual threshold below which Gram-Schmidt declares dependence.
pub const DEFAULT_DEP_TOL: f64 = 1e-8;

/// Largest Gram-matrix condition estimate accepted by the inverse-form projection.
pub const DEFAULT_COND_MAX: f64 = 1e12;

/// Norm below which a vector is treated as zero.
pub const DEFAULT_ZERO_TOL: f64 = 1e-12;

/// Tolerance used by [`frechet_gaussian`] to check covariance symmetry,
/// relative to the largest covariance entry.
pub const SYMMETRY_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

pub(crate) fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

// ---------------------------------------------------------------------------
// Mat
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row-major data. Rejects empty shapes and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty);
        }
        check_dim(rows * cols, data.len())?;
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// Build from a list of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty)?.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * first);
        for r in rows {
            let r = r.as_ref();
            check_dim(first, r.len())?;
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), first, data)
    }

    /// Build from a list of equally long columns.
    pub fn from_columns<C: AsRef<[f64]>>(cols: &[C]) -> Result<Self> {
        Ok(Self::from_rows(cols)?.transpose())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        check_dim(self.cols, rhs.rows)?;
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, rhs.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `x^T * self` for a row vector `x`.
    pub fn left_mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (k, &a) in x.iter().enumerate() {
            if a != 0.0 {
                axpy(a, self.row(k), &mut out);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

// ---------------------------------------------------------------------------
// Cosine
// ---------------------------------------------------------------------------

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Returns [`Error::ZeroNorm`] if either norm is below `zero_tol`; callers
/// decide what a zero vector means for them.
pub fn cosine(x: &[f64], y: &[f64], zero_tol: f64) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    check_finite(x)?;
    check_finite(y)?;
    let (nx, ny) = (norm(x), norm(y));
    if nx < zero_tol || ny < zero_tol {
        return Err(Error::ZeroNorm);
    }
    if nx.is_finite() && ny.is_finite() && (nx * ny).is_normal() {
        return Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0));
    }
    // rescale to avoid overflow/underflow in the products
    let unit = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let s: Vec<f64> = v.iter().map(|a| a / m).collect();
        let n = norm(&s);
        s.into_iter().map(|a| a / n).collect()
    };
    Ok(dot(&unit(x), &unit(y)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Gram-Schmidt
// ---------------------------------------------------------------------------

/// Orthonormal basis together with the upper-triangular weight matrix `W`
/// that maps the original vectors onto it: `[v_1 .. v_n] * W = [o_1 .. o_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalSet {
    dim: usize,
    dep_tol: f64,
    basis: Vec<Vec<f64>>,
    // column-major n x n, grown one column per pushed vector
    weight_cols: Vec<Vec<f64>>,
}

impl OrthonormalSet {
    /// Empty set in `dim` dimensions.
    pub fn empty(dim: usize, dep_tol: f64) -> Self {
        Self {
            dim,
            dep_tol,
            basis: Vec::new(),
            weight_cols: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Entry `w_hk` of the weight matrix (row `h`, column `k`).
    #[inline]
    pub fn weight(&self, h: usize, k: usize) -> f64 {
        self.weight_cols[k].get(h).copied().unwrap_or(0.0)
    }

    /// The full `n x n` weight matrix.
    pub fn weights(&self) -> Mat {
        let n = self.len();
        let mut w = Mat::zeros(n, n);
        for k in 0..n {
            for h in 0..=k {
                w[(h, k)] = self.weight(h, k);
            }
        }
        w
    }

    /// Orthogonalize `v` against the current basis and append it.
    ///
    /// Modified Gram-Schmidt followed by one re-orthogonalization pass. The
    /// set is left untouched on error.
    pub fn push(&mut self, v: &[f64]) -> Result<()> {
        check_dim(self.dim, v.len())?;
        check_finite(v)?;
        let index = self.len();
        let input_norm = norm(v);
        if index >= self.dim || input_norm == 0.0 {
            return Err(Error::LinearlyDependent { index });
        }

        let mut residual = v.to_vec();
        let mut coeffs = vec![0.0; index];
        for _pass in 0..2 {
            for (c, o) in coeffs.iter_mut().zip(&self.basis) {
                let r = dot(o, &residual);
                axpy(-r, o, &mut residual);
                *c += r;
            }
        }
        let rho = norm(&residual);
        if rho < self.dep_tol * input_norm {
            return Err(Error::LinearlyDependent { index });
        }
        residual.iter_mut().for_each(|x| *x /= rho);

        // o_new = (v - sum_k c_k o_k) / rho and o_k = V w_k
        let mut col = vec![0.0; index + 1];
        col[index] = 1.0;
        for (k, &c) in coeffs.iter().enumerate() {
            for (h, w) in self.weight_cols[k].iter().enumerate() {
                col[h] -= c * w;
            }
        }
        col.iter_mut().for_each(|x| *x /= rho);

        self.basis.push(residual);
        self.weight_cols.push(col);
        Ok(())
    }
}

/// Orthonormalize `vectors` in order.
///
/// Fails with [`Error::LinearlyDependent`] naming the first vector whose
/// residual falls below `dep_tol` times its own norm.
pub fn gram_schmidt<V: AsRef<[f64]>>(vectors: &[V], dep_tol: f64) -> Result<OrthonormalSet> {
    let dim = vectors.first().ok_or(Error::Empty)?.as_ref().len();
    if dim == 0 {
        return Err(Error::Empty);
    }
    let mut set = OrthonormalSet::empty(dim, dep_tol);
    for v in vectors {
        set.push(v.as_ref())?;
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Complement projections
// ---------------------------------------------------------------------------

/// `v - sum_h (o_h^T v) o_h`, the component of `v` orthogonal to the span of
/// the basis.
pub fn project_complement_basis(v: &[f64], basis: &OrthonormalSet) -> Result<Vec<f64>> {
    check_dim(basis.dim(), v.len())?;
    check_finite(v)?;
    let mut out = v.to_vec();
    for o in basis.basis() {
        let r = dot(o, &out);
        axpy(-r, o, &mut out);
    }
    Ok(out)
}

/// `(I - V (V^T V)^{-1} V^T) v` for a `d x n` spanning matrix `V`.
///
/// The Gram matrix is factored by diagonally pivoted Cholesky; the ratio of
/// the largest to smallest pivot is the condition estimate checked against
/// `cond_max`. One step of iterative refinement is applied to the solve.
pub fn project_complement_inverse(v: &[f64], spanning: &Mat, cond_max: f64) -> Result<Vec<f64>> {
    check_dim(spanning.rows(), v.len())?;
    check_finite(v)?;
    if !spanning.is_finite() {
        return Err(Error::NonFinite);
    }
    let cols: Vec<Vec<f64>> = (0..spanning.cols()).map(|j| spanning.column(j)).collect();
    let gram = PivotedCholesky::factor(&gram_of(&cols))?;
    let condition = gram.condition_estimate();
    if condition.is_nan() || condition > cond_max {
        return Err(Error::SingularGram { condition });
    }

    let rhs: Vec<f64> = cols.iter().map(|c| dot(c, v)).collect();
    let mut coef = gram.solve(&rhs);
    let mut out = residual_of(v, &cols, &coef);

    let correction_rhs: Vec<f64> = cols.iter().map(|c| dot(c, &out)).collect();
    let correction = gram.solve(&correction_rhs);
    coef.iter_mut().zip(&correction).for_each(|(c, d)| *c += d);
    out = residual_of(v, &cols, &coef);
    Ok(out)
}

fn gram_of(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = cols.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let x = dot(&cols[i], &cols[j]);
            g[i][j] = x;
            g[j][i] = x;
        }
    }
    g
}

fn residual_of(v: &[f64], cols: &[Vec<f64>], coef: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (c, &x) in cols.iter().zip(coef) {
        axpy(-x, c, &mut out);
    }
    out
}

/// `P^T G P = L L^T` with diagonal pivoting.
struct PivotedCholesky {
    lower: Vec<Vec<f64>>,
    perm: Vec<usize>,
}

impl PivotedCholesky {
    fn factor(g: &[Vec<f64>]) -> Result<Self> {
        let n = g.len();
        let mut a: Vec<Vec<f64>> = g.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut lower = vec![vec![0.0; n]; n];
        for k in 0..n {
            // pick the largest remaining diagonal
            let p = (k..n)
                .max_by(|&i, &j| a[i][i].total_cmp(&a[j][j]))
                .unwrap_or(k);
            if p != k {
                a.swap(k, p);
                for row in a.iter_mut() {
                    row.swap(k, p);
                }
                lower.swap(k, p);
                perm.swap(k, p);
            }
            let pivot = a[k][k];
            if pivot.is_nan() || pivot <= 0.0 {
                return Err(Error::SingularGram {
                    condition: f64::INFINITY,
                });
            }
            let lkk = pivot.sqrt();
            lower[k][k] = lkk;
            for i in k + 1..n {
                lower[i][k] = a[i][k] / lkk;
            }
            for i in k + 1..n {
                for j in k + 1..=i {
                    let upd = lower[i][k] * lower[j][k];
                    a[i][j] -= upd;
                    if i != j {
                        a[j][i] -= upd;
                    }
                }
            }
        }
        Ok(Self { lower, perm })
    }

    fn condition_estimate(&self) -> f64 {
        let diag: Vec<f64> = (0..self.lower.len()).map(|k| self.lower[k][k]).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        (max / min).powi(2)
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.lower[i][k] * y[k]).sum();
            y[i] = (y[i] - s) / self.lower[i][i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.lower[k][i] * y[k]).sum();
            y[i] = (y[i] - s) / self.lower[i][i];
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Gaussian Frechet distance
// ---------------------------------------------------------------------------

/// Mean and covariance of a Gaussian fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub covariance: Mat,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, covariance: Mat) -> Result<Self> {
        check_finite(&mean)?;
        check_dim(mean.len(), covariance.rows())?;
        check_dim(mean.len(), covariance.cols())?;
        if !covariance.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self { mean, covariance })
    }

    /// Sample mean and unbiased sample covariance. Needs at least two samples.
    pub fn fit<S: AsRef<[f64]>>(samples: &[S]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                found: samples.len(),
            });
        }
        let d = samples[0].as_ref().len();
        let mut mean = vec![0.0; d];
        for s in samples {
            let s = s.as_ref();
            check_dim(d, s.len())?;
            check_finite(s)?;
            axpy(1.0, s, &mut mean);
        }
        let n = samples.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);

        let mut cov = Mat::zeros(d, d);
        for s in samples {
            let c = sub(s.as_ref(), &mean);
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1.0);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(Self {
            mean,
            covariance: cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_symmetric(m: &Mat) -> Result<()> {
    let tol = SYMMETRY_TOL * m.max_abs().max(1.0);
    for i in 0..m.rows() {
        for j in i + 1..m.cols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues below
/// `n * eps * max |lambda|` are rounding noise and clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |t, l| t.max(l.abs()));
    let floor = m.nrows() as f64 * f64::EPSILON * top;
    let roots = eig
        .eigenvalues
        .map(|l| if l > floor { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Frechet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_gaussian(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    check_symmetric(&a.covariance)?;
    check_symmetric(&b.covariance)?;

    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let sa = a.covariance.to_nalgebra();
    let sb = b.covariance.to_nalgebra();
    // tr (S_a^{1/2} S_b S_a^{1/2})^{1/2} is the nuclear norm of S_a^{1/2} S_b^{1/2}
    let product = sqrtm_psd(&sa) * sqrtm_psd(&sb);
    let cross: f64 = product.singular_values().iter().sum();

    let value = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}
