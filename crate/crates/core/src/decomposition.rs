//! Output decomposition into an attacked part `z1`, a part `z2` that sees the
//! previous step's attack only through the dynamics, and an attack-free part
//! `z3`.
//!
//! Two coordinate changes are built per step. The first comes from the SVD of
//! the feedthrough matrix `H` and whitens the attacked directions against the
//! rest of the output; the second repeats the construction on
//! `T2 C G_prev V2`. Rank-zero cases produce zero-row blocks.

use crate::error::{Error, Result};
use crate::numerics::{
    orthogonal_complement, spd_inverse, svd_with_tol, symmetrize, Matrix, Vector, DEFAULT_RANK_TOL,
};

/// Coordinate transformations for one mode at one step.
#[derive(Debug, Clone)]
pub struct DecompositionTransforms {
    /// `p1 x m`
    pub t1: Matrix,
    /// `(m - p1) x m`
    pub t2: Matrix,
    /// `p2 x (m - p1)`
    pub tbar1: Matrix,
    /// `p3 x (m - p1)`
    pub tbar2: Matrix,
    /// Diagonal of `Sigma` (equals `H1`).
    pub sigma: Vector,
    /// Diagonal of `Sigma_bar`.
    pub sigma_bar: Vector,
    /// Basis of the directly measured attack component, `(s+m) x p1`.
    pub v1: Matrix,
    /// Basis of the attack component seen through the dynamics, `(s+m) x p2`.
    pub v2: Matrix,
    pub rank_sigma: usize,
    pub rank_sigma_bar: usize,
    /// Attack location of each `d1` element when `v1` is made of unit vectors.
    pub d1_locations: Option<Vec<usize>>,
    /// Attack location of each `d2` element when `v2` is made of unit vectors.
    pub d2_locations: Option<Vec<usize>>,
}

/// Output split into its three parts.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedOutput {
    pub z1: Vector,
    pub z2: Vector,
    pub z3: Vector,
}

/// Measurement-noise covariance of each output part.
#[derive(Debug, Clone)]
pub struct DecomposedNoise {
    pub r1: Matrix,
    pub r2: Matrix,
    pub r3: Matrix,
}

impl DecompositionTransforms {
    pub fn output_dim(&self) -> usize {
        self.t1.ncols()
    }
    pub fn p1(&self) -> usize {
        self.t1.nrows()
    }
    pub fn p2(&self) -> usize {
        self.tbar1.nrows()
    }
    pub fn p3(&self) -> usize {
        self.tbar2.nrows()
    }

    /// `Tbar1 T2`, the map from `y` to `z2`.
    pub fn z2_map(&self) -> Matrix {
        &self.tbar1 * &self.t2
    }

    /// `Tbar2 T2`, the map from `y` to `z3`.
    pub fn z3_map(&self) -> Matrix {
        &self.tbar2 * &self.t2
    }

    /// Applies the three output maps to an `m`-row matrix (e.g. `C`).
    pub fn split_rows(&self, c: &Matrix) -> (Matrix, Matrix, Matrix) {
        (&self.t1 * c, self.z2_map() * c, self.z3_map() * c)
    }

    pub fn sigma_inverse(&self) -> Matrix {
        Matrix::from_diagonal(&self.sigma.map(|s| 1.0 / s))
    }
}

/// Factorisation `M = U1 diag(sigma) V1^T` plus complements.
struct Factor {
    u1: Matrix,
    u2: Matrix,
    sigma: Vector,
    v1: Matrix,
    v2: Matrix,
    /// Column indices picked by `v1` / `v2` when both are unit-vector bases.
    columns: Option<(Vec<usize>, Vec<usize>)>,
}

/// When the nonzero columns of `m` are mutually orthogonal the SVD can be
/// read off directly, with `V1` made of unit vectors in ascending column
/// order. This keeps every element of `d1`/`d2` tied to one attack location.
fn column_factor(m: &Matrix, rank_tol: f64) -> Option<Factor> {
    let (rows, cols) = m.shape();
    let norms: Vec<f64> = (0..cols).map(|j| m.column(j).norm()).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let picked: Vec<usize> = (0..cols).filter(|&j| max > 0.0 && norms[j] > rank_tol * max).collect();
    for (a, &i) in picked.iter().enumerate() {
        for &j in &picked[a + 1..] {
            if m.column(i).dot(&m.column(j)).abs() > 1e-12 * norms[i] * norms[j] {
                return None;
            }
        }
    }
    let rest: Vec<usize> = (0..cols).filter(|j| !picked.contains(j)).collect();
    let r = picked.len();
    let mut u1 = Matrix::zeros(rows, r);
    let mut v1 = Matrix::zeros(cols, r);
    let mut v2 = Matrix::zeros(cols, cols - r);
    let sigma = Vector::from_iterator(r, picked.iter().map(|&j| norms[j]));
    for (k, &j) in picked.iter().enumerate() {
        u1.set_column(k, &(m.column(j) / norms[j]));
        v1[(j, k)] = 1.0;
    }
    for (k, &j) in rest.iter().enumerate() {
        v2[(j, k)] = 1.0;
    }
    let u2 = if r == 0 { Matrix::identity(rows, rows) } else { orthogonal_complement(&u1) };
    Some(Factor {
        u1,
        u2,
        sigma,
        v1,
        v2,
        columns: Some((picked, rest)),
    })
}

fn svd_factor(m: &Matrix, rank_tol: f64) -> Result<Factor> {
    let (rows, cols) = m.shape();
    let dec = svd_with_tol(m, rank_tol)?;
    let r = dec.numerical_rank;
    let (u1, u2) = if r == 0 {
        (Matrix::zeros(rows, 0), Matrix::identity(rows, rows))
    } else {
        (dec.u.columns(0, r).into_owned(), dec.u.columns(r, rows - r).into_owned())
    };
    Ok(Factor {
        u1,
        u2,
        sigma: dec.singular_values.rows(0, r).into_owned(),
        v1: dec.v.columns(0, r).into_owned(),
        v2: dec.v.columns(r, cols - r).into_owned(),
        columns: None,
    })
}

fn factor(m: &Matrix, rank_tol: f64) -> Result<Factor> {
    match column_factor(m, rank_tol) {
        Some(f) => Ok(f),
        None => svd_factor(m, rank_tol),
    }
}

/// `[I, -U1' R U2 (U2' R U2)^-1] [U1'; U2']`, split into its two row blocks.
fn whitened_split(u1: &Matrix, u2: &Matrix, r: &Matrix) -> Result<(Matrix, Matrix)> {
    let top = if u2.ncols() == 0 || u1.ncols() == 0 {
        u1.transpose()
    } else {
        let inner = spd_inverse(&(u2.transpose() * r * u2), "U2' R U2")
            .map_err(|_| Error::Numerical("U2' R U2 is singular although R is positive definite".into()))?;
        u1.transpose() - u1.transpose() * r * u2 * inner * u2.transpose()
    };
    Ok((top, u2.transpose()))
}

/// Builds both coordinate transformations.
///
/// `h` is `m x (s+m)`, `r` is `m x m`, `c` is `m x n` and `g_prev` is
/// `n x (s+m)`.
pub fn build_transforms(h: &Matrix, r: &Matrix, c: &Matrix, g_prev: &Matrix) -> Result<DecompositionTransforms> {
    build_transforms_with_tol(h, r, c, g_prev, DEFAULT_RANK_TOL)
}

pub fn build_transforms_with_tol(
    h: &Matrix,
    r: &Matrix,
    c: &Matrix,
    g_prev: &Matrix,
    rank_tol: f64,
) -> Result<DecompositionTransforms> {
    let m = h.nrows();
    let q = h.ncols();
    if r.shape() != (m, m) {
        return Err(Error::dim("build_transforms R", format!("{m}x{m}"), format!("{:?}", r.shape())));
    }
    if c.nrows() != m {
        return Err(Error::dim("build_transforms C rows", m, c.nrows()));
    }
    if g_prev.shape() != (c.ncols(), q) {
        return Err(Error::dim(
            "build_transforms G",
            format!("{}x{}", c.ncols(), q),
            format!("{:?}", g_prev.shape()),
        ));
    }

    let first = factor(h, rank_tol)?;
    let (t1, t2) = whitened_split(&first.u1, &first.u2, r)?;

    let r_bar = symmetrize(&(&t2 * r * t2.transpose()));
    let m_bar = &t2 * c * g_prev * &first.v2;
    let second = factor(&m_bar, rank_tol)?;
    let (tbar1, tbar2) = whitened_split(&second.u1, &second.u2, &r_bar)?;

    let d1_locations = first.columns.as_ref().map(|(picked, _)| picked.clone());
    let d2_locations = match (&first.columns, &second.columns) {
        (Some((_, rest)), Some((picked, _))) => Some(picked.iter().map(|&k| rest[k]).collect()),
        _ => None,
    };

    Ok(DecompositionTransforms {
        rank_sigma: first.sigma.len(),
        rank_sigma_bar: second.sigma.len(),
        v2: &first.v2 * &second.v1,
        v1: first.v1,
        sigma: first.sigma,
        sigma_bar: second.sigma,
        t1,
        t2,
        tbar1,
        tbar2,
        d1_locations,
        d2_locations,
    })
}

/// `z1 = T1 y`, `z2 = Tbar1 T2 y`, `z3 = Tbar2 T2 y`.
pub fn decompose_output(y: &Vector, t: &DecompositionTransforms) -> Result<DecomposedOutput> {
    if y.len() != t.output_dim() {
        return Err(Error::dim("decompose_output", t.output_dim(), y.len()));
    }
    let w = &t.t2 * y;
    Ok(DecomposedOutput {
        z1: &t.t1 * y,
        z2: &t.tbar1 * &w,
        z3: &t.tbar2 * &w,
    })
}

pub fn decompose_noise(r: &Matrix, t: &DecompositionTransforms) -> Result<DecomposedNoise> {
    let m = t.output_dim();
    if r.shape() != (m, m) {
        return Err(Error::dim("decompose_noise", format!("{m}x{m}"), format!("{:?}", r.shape())));
    }
    let t2m = t.z2_map();
    let t3m = t.z3_map();
    Ok(DecomposedNoise {
        r1: symmetrize(&(&t.t1 * r * t.t1.transpose())),
        r2: symmetrize(&(&t2m * r * t2m.transpose())),
        r3: symmetrize(&(&t3m * r * t3m.transpose())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::min_eigenvalue;

    fn selection(m: usize, s: usize, sensors: &[usize]) -> Matrix {
        let mut h = Matrix::zeros(m, s + m);
        for &i in sensors {
            h[(i, s + i)] = 1.0;
        }
        h
    }

    #[test]
    fn zero_feedthrough_keeps_identity() {
        let m = 3;
        let h = Matrix::zeros(m, 1 + m);
        let r = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 2.0, 3.0]));
        let c = Matrix::identity(3, 2);
        let g = Matrix::zeros(2, 1 + m);
        let t = build_transforms(&h, &r, &c, &g).unwrap();
        assert_eq!(t.p1(), 0);
        assert_eq!(t.p2(), 0);
        assert_eq!(t.p3(), 3);
        assert!((&t.t2 - Matrix::identity(3, 3)).amax() == 0.0);
        assert!((&t.tbar2 - Matrix::identity(3, 3)).amax() == 0.0);
    }

    #[test]
    fn both_sensors_attacked() {
        let h = selection(2, 1, &[0, 1]);
        let r = Matrix::identity(2, 2);
        let c = Matrix::identity(2, 2);
        let g = Matrix::zeros(2, 3);
        let t = build_transforms(&h, &r, &c, &g).unwrap();
        assert_eq!(t.rank_sigma, 2);
        assert_eq!(t.p3(), 0);
        assert!((&t.t1 - Matrix::identity(2, 2)).amax() < 1e-15);
        assert_eq!(t.sigma.as_slice(), &[1.0, 1.0]);
        assert_eq!(t.d1_locations.as_deref(), Some(&[1usize, 2][..]));
    }

    #[test]
    fn identity_split_slices_coordinates() {
        let h = selection(3, 0, &[0]);
        let t = build_transforms(&h, &Matrix::identity(3, 3), &Matrix::identity(3, 3), &Matrix::zeros(3, 3)).unwrap();
        let y = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let z = decompose_output(&y, &t).unwrap();
        assert_eq!(z.z1.as_slice(), &[1.0]);
        assert_eq!(z.z2.len(), 0);
        let mut parts: Vec<f64> = z.z3.iter().map(|v| v.abs()).collect();
        parts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(parts, vec![2.0, 3.0]);
        let zero = decompose_output(&Vector::zeros(3), &t).unwrap();
        assert!(zero.z1.iter().chain(zero.z3.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn diagonal_noise_blocks_are_positive_definite() {
        let m = 4;
        let h = selection(m, 1, &[1]);
        let r = Matrix::from_diagonal(&Vector::from_iterator(m, (1..=m).map(|v| v as f64)));
        let c = Matrix::identity(m, 3);
        let mut g = Matrix::zeros(3, 1 + m);
        g[(2, 0)] = 1.0;
        let t = build_transforms(&h, &r, &c, &g).unwrap();
        let n = decompose_noise(&r, &t).unwrap();
        for block in [&n.r1, &n.r2, &n.r3] {
            if block.nrows() > 0 {
                assert!(min_eigenvalue(block) > 0.0);
            }
        }
        assert_eq!(t.p1() + t.p2() + t.p3(), m);
        assert_eq!(t.d2_locations.as_deref(), Some(&[0usize][..]));
    }

    #[test]
    fn rejects_bad_dimensions() {
        let h = Matrix::zeros(2, 3);
        let r = Matrix::identity(3, 3);
        assert!(build_transforms(&h, &r, &Matrix::zeros(2, 2), &Matrix::zeros(2, 3)).is_err());
        let t = build_transforms(&h, &Matrix::identity(2, 2), &Matrix::zeros(2, 2), &Matrix::zeros(2, 3)).unwrap();
        assert!(decompose_output(&Vector::zeros(3), &t).is_err());
    }
}
