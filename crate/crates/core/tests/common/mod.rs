#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use nisme::numerics::{svd, Matrix, Vector};
use nisme::scenario::ScenarioSpec;
use nisme::{AttackLocationSet, LinearSystem, ModeLabel, ModeModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Random SPD matrix with eigenvalues in `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Matrix {
    let q = randn(rng, n, n).qr().q();
    let d = Vector::from_fn(n, |_, _| rng.random_range(lo..hi));
    &q * Matrix::from_diagonal(&d) * q.transpose()
}

/// Random Hurwitz matrix: `M - (max Re eig + margin) I`.
pub fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let m = randn(rng, n, n);
    let shift = m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    m - Matrix::identity(n, n) * (shift + 0.5)
}

/// Rank of the observability matrix of `(a, c)`.
pub fn observability_rank(a: &Matrix, c: &Matrix) -> usize {
    let n = a.nrows();
    let mut rows = Matrix::zeros(c.nrows() * n, n);
    let mut block = c.clone();
    for i in 0..n {
        rows.view_mut((i * c.nrows(), 0), (c.nrows(), n)).copy_from(&block);
        block = &block * a;
    }
    svd(&rows).unwrap().numerical_rank
}

pub fn linear_mode(a: Matrix, b: Matrix, c: Matrix, attacks: &[usize], q: Matrix, r: Matrix) -> ModeModel {
    ModeModel::new(
        ModeLabel::new(0, AttackLocationSet::from_indices(attacks.iter().copied())),
        Arc::new(LinearSystem::new(a, b, c)),
        q,
        r,
    )
    .unwrap()
}

pub fn scenario(name: &str) -> ScenarioSpec {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    ScenarioSpec::load(&path).unwrap()
}

/// Textbook discrete Kalman filter for `x+ = F x + Bd u + w`, `y = C x + v`.
pub struct KalmanOracle {
    pub f: Matrix,
    pub bd: Matrix,
    pub c: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub x: Vector,
    pub p: Matrix,
}

impl KalmanOracle {
    pub fn step(&mut self, u_prev: &Vector, y: &Vector) {
        let x_pred = &self.f * &self.x + &self.bd * u_prev;
        let p_pred = &self.f * &self.p * self.f.transpose() + &self.q;
        let s = &self.c * &p_pred * self.c.transpose() + &self.r;
        let k = &p_pred * self.c.transpose() * s.try_inverse().unwrap();
        self.x = &x_pred + &k * (y - &self.c * &x_pred);
        let n = self.x.len();
        self.p = (Matrix::identity(n, n) - &k * &self.c) * p_pred;
        self.p = (&self.p + self.p.transpose()) * 0.5;
    }
}

pub fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
