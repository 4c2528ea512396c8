//! Dense linear-algebra helpers and the quantile functions used by the
//! hypothesis tests.
//!
//! Everything here is a pure function of its inputs.

use nalgebra::{DMatrix, DVector};
use statrs::function::{erf::erf, gamma::gamma_lr};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative threshold below which a singular value counts as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const QUANTILE_TOL: f64 = 1e-10;

/// Full singular value decomposition `M = U diag(s) V^T`.
///
/// `u` is `rows x rows`, `v` is `cols x cols`, both orthogonal. Singular
/// values are sorted descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vector,
    pub v: Matrix,
    pub numerical_rank: usize,
}

impl SvdResult {
    /// `U diag(s) V^T` with the rectangular diagonal padded as needed.
    pub fn reconstruct(&self) -> Matrix {
        let (r, c) = (self.u.nrows(), self.v.nrows());
        let mut s = Matrix::zeros(r, c);
        for (i, &sv) in self.singular_values.iter().enumerate() {
            s[(i, i)] = sv;
        }
        &self.u * s * self.v.transpose()
    }
}

/// Full SVD with the default rank tolerance.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    svd_with_tol(m, DEFAULT_RANK_TOL)
}

pub fn svd_with_tol(m: &Matrix, rank_tol: f64) -> Result<SvdResult> {
    ensure_finite(m, "svd")?;
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SvdResult {
            u: Matrix::identity(rows, rows),
            singular_values: Vector::zeros(0),
            v: Matrix::identity(cols, cols),
            numerical_rank: 0,
        });
    }
    // nalgebra's bidiagonal SVD loses accuracy on some rank-deficient inputs
    // with zero columns, so the factorisation is delegated to faer.
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let dec = fm
        .svd()
        .map_err(|e| Error::Numerical(format!("svd of {rows}x{cols} did not converge: {e:?}")))?;
    let s = Vector::from_iterator(k, (0..k).map(|i| dec.S()[i]));
    let u_full = Matrix::from_fn(rows, rows, |i, j| dec.U()[(i, j)]);
    let v_full = Matrix::from_fn(cols, cols, |i, j| dec.V()[(i, j)]);
    let numerical_rank = rank_of(s.as_slice(), rank_tol);
    Ok(SvdResult {
        u: u_full,
        singular_values: s,
        v: v_full,
        numerical_rank,
    })
}

fn rank_of(sorted_desc: &[f64], rank_tol: f64) -> usize {
    let smax = sorted_desc.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    sorted_desc.iter().filter(|&&s| s > rank_tol * smax).count()
}

/// Extends the orthonormal columns of `q` (r x k, k <= r) to an r x r
/// orthogonal matrix whose leading k columns are exactly `q`.
pub fn complete_basis(q: &Matrix) -> Matrix {
    let (r, k) = q.shape();
    if k >= r {
        return q.columns(0, r).into_owned();
    }
    let mut aug = Matrix::zeros(r, k + r);
    aug.columns_mut(0, k).copy_from(q);
    aug.columns_mut(k, r).fill_with_identity();
    let full = aug.qr().q();
    let mut out = full;
    out.columns_mut(0, k).copy_from(q);
    out
}

/// Orthonormal basis of the orthogonal complement of the column space of
/// `q`, assuming `q` already has orthonormal columns.
pub fn orthogonal_complement(q: &Matrix) -> Matrix {
    let (r, k) = q.shape();
    complete_basis(q).columns(k, r - k).into_owned()
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn ensure_finite(m: &Matrix, context: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{context}: non-finite entry")))
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &Matrix, context: &str) -> Result<Matrix> {
    if m.nrows() == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    symmetrize(m)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{context}: matrix is not positive definite")))
}

/// Smallest eigenvalue of a symmetric matrix (0 for an empty matrix).
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().max()
}

/// Moore-Penrose pseudo-inverse, log pseudo-determinant and numerical rank of
/// a symmetric matrix.
pub fn pinv_det_log(m: &Matrix) -> Result<(Matrix, f64, usize)> {
    pinv_det_log_with_tol(m, DEFAULT_RANK_TOL)
}

pub fn pinv_det_log_with_tol(m: &Matrix, rank_tol: f64) -> Result<(Matrix, f64, usize)> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim("pinv_det_log", "square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok((Matrix::zeros(0, 0), 0.0, 0));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-8 * scale {
        return Err(Error::Domain("pinv_det_log requires a symmetric matrix".into()));
    }
    let dec = svd_with_tol(m, rank_tol)?;
    let rank = dec.numerical_rank;
    let mut pinv = Matrix::zeros(n, n);
    let mut log_det = 0.0;
    for i in 0..rank {
        let s = dec.singular_values[i];
        log_det += s.ln();
        let vi = dec.v.column(i);
        let ui = dec.u.column(i);
        pinv += (vi * ui.transpose()) / s;
    }
    Ok((symmetrize(&pinv), log_det, rank))
}

/// CDF of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_cdf(df: usize, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(df as f64 / 2.0, x / 2.0)
    }
}

/// Value `q` with `P(X <= q) = significance` for `X ~ chi-square(df)`.
pub fn chi_square_quantile(df: usize, significance: f64) -> Result<f64> {
    if df == 0 {
        return Err(Error::Domain("chi-square quantile needs df >= 1".into()));
    }
    check_probability(significance)?;
    let mut hi = df as f64 + 10.0;
    while chi_square_cdf(df, hi) < significance {
        hi *= 2.0;
    }
    Ok(bisect(0.0, hi, |x| chi_square_cdf(df, x) - significance))
}

/// Two-tailed standard normal critical value: `P(|Z| <= z) = significance`.
pub fn z_quantile(significance: f64) -> Result<f64> {
    check_probability(significance)?;
    let two_sided = |z: f64| erf(z / std::f64::consts::SQRT_2);
    let mut hi = 4.0;
    while two_sided(hi) < significance {
        hi *= 2.0;
    }
    Ok(bisect(0.0, hi, |z| two_sided(z) - significance))
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("significance {p} outside (0, 1)")))
    }
}

/// Root of an increasing function on `[lo, hi]`.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    while hi - lo > QUANTILE_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
