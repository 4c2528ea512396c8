//! Per-mode system descriptions.
//!
//! Attack locations are indexed actuator-first: locations `0..s` are the
//! actuator channels and `s..s+m` are the sensor channels, so the stacked
//! attack vector is `d = [d_a; d_s]`.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{min_eigenvalue, Matrix, Vector};

/// Continuous-time dynamics `x' = f(x, u, t)` with sampled output `y = h(x, u, t)`.
///
/// Jacobians default to central finite differences; models with closed-form
/// derivatives should override them.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn dynamics(&self, x: &Vector, u: &Vector, t: f64) -> Vector;
    fn output(&self, x: &Vector, u: &Vector, t: f64) -> Vector;

    fn state_jacobian(&self, x: &Vector, u: &Vector, t: f64) -> Matrix {
        central_difference(x, |xp| self.dynamics(xp, u, t))
    }

    fn input_jacobian(&self, x: &Vector, u: &Vector, t: f64) -> Matrix {
        central_difference(u, |up| self.dynamics(x, up, t))
    }

    fn output_jacobian(&self, x: &Vector, u: &Vector, t: f64) -> Matrix {
        central_difference(x, |xp| self.output(xp, u, t))
    }

    /// True when `f` and `h` are affine in `(x, u)` with constant Jacobians.
    fn is_linear(&self) -> bool {
        false
    }
}

/// Central-difference Jacobian of `g` at `at`, step `sqrt(eps) * (1 + |x_i|)`.
pub fn central_difference(at: &Vector, g: impl Fn(&Vector) -> Vector) -> Matrix {
    let base = g(at);
    let mut jac = Matrix::zeros(base.len(), at.len());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let h = f64::EPSILON.sqrt() * (1.0 + at[i].abs());
        probe[i] = at[i] + h;
        let plus = g(&probe);
        probe[i] = at[i] - h;
        let minus = g(&probe);
        probe[i] = at[i];
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    jac
}

/// `x' = A x + B u + c`, `y = C x + D u + e`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub drift: Vector,
    pub output_offset: Vector,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Self {
        let (n, s, m) = (a.nrows(), b.ncols(), c.nrows());
        LinearSystem {
            a,
            b,
            c,
            d: Matrix::zeros(m, s),
            drift: Vector::zeros(n),
            output_offset: Vector::zeros(m),
        }
    }
}

impl SystemModel for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn output_dim(&self) -> usize {
        self.c.nrows()
    }
    fn dynamics(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
        &self.a * x + &self.b * u + &self.drift
    }
    fn output(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
        &self.c * x + &self.d * u + &self.output_offset
    }
    fn state_jacobian(&self, _x: &Vector, _u: &Vector, _t: f64) -> Matrix {
        self.a.clone()
    }
    fn input_jacobian(&self, _x: &Vector, _u: &Vector, _t: f64) -> Matrix {
        self.b.clone()
    }
    fn output_jacobian(&self, _x: &Vector, _u: &Vector, _t: f64) -> Matrix {
        self.c.clone()
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// Set of attacked locations, i.e. the support of `diag(K)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct AttackLocationSet {
    indices: BTreeSet<usize>,
}

impl AttackLocationSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        AttackLocationSet {
            indices: indices.into_iter().collect(),
        }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    pub fn is_strict_subset(&self, other: &AttackLocationSet) -> bool {
        self.indices.len() < other.indices.len() && self.indices.is_subset(&other.indices)
    }

    /// Diagonal 0/1 matrix `K` of size `total`.
    pub fn k_matrix(&self, total: usize) -> Matrix {
        let mut k = Matrix::zeros(total, total);
        for &i in &self.indices {
            if i < total {
                k[(i, i)] = 1.0;
            }
        }
        k
    }

    /// Actuator selection `S = [K_S, 0]`, shape `s x (s+m)`.
    pub fn actuator_selection(&self, s: usize, m: usize) -> Matrix {
        let mut sel = Matrix::zeros(s, s + m);
        for &i in self.indices.iter().filter(|&&i| i < s) {
            sel[(i, i)] = 1.0;
        }
        sel
    }

    /// Sensor selection `H = [0, K_H]`, shape `m x (s+m)`.
    pub fn sensor_selection(&self, s: usize, m: usize) -> Matrix {
        let mut sel = Matrix::zeros(m, s + m);
        for &i in self.indices.iter().filter(|&&i| i >= s && i < s + m) {
            sel[(i - s, i)] = 1.0;
        }
        sel
    }

    /// Every subset of `candidates`, i.e. the signal-mode power set.
    pub fn power_set(candidates: &[usize]) -> Vec<AttackLocationSet> {
        let n = candidates.len();
        assert!(n < 32, "power set of {n} locations is too large");
        (0u32..(1u32 << n))
            .map(|mask| {
                AttackLocationSet::from_indices(
                    (0..n).filter(|b| mask & (1 << b) != 0).map(|b| candidates[b]),
                )
            })
            .collect()
    }
}

impl fmt::Display for AttackLocationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(" "))
    }
}

/// Hidden-mode identity: a structural configuration plus the assumed attack
/// locations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModeLabel {
    pub structure: usize,
    pub attacks: AttackLocationSet,
}

impl ModeLabel {
    pub fn new(structure: usize, attacks: AttackLocationSet) -> Self {
        ModeLabel { structure, attacks }
    }

    pub fn attack_free(&self) -> Self {
        ModeLabel::new(self.structure, AttackLocationSet::empty())
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}:{}", self.structure, self.attacks)
    }
}

/// One hypothesis of the mode bank.
#[derive(Clone)]
pub struct ModeModel {
    pub label: ModeLabel,
    pub system: Arc<dyn SystemModel>,
    /// Covariance of `w_k` in `x_{k+1} = x_k + eps (f + w_k)`.
    pub process_noise: Matrix,
    /// Covariance of the measurement noise `v_k`.
    pub measurement_noise: Matrix,
}

impl fmt::Debug for ModeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModeModel")
            .field("label", &self.label)
            .field("n", &self.state_dim())
            .field("s", &self.input_dim())
            .field("m", &self.output_dim())
            .finish()
    }
}

impl ModeModel {
    pub fn new(
        label: ModeLabel,
        system: Arc<dyn SystemModel>,
        process_noise: Matrix,
        measurement_noise: Matrix,
    ) -> Result<Self> {
        let model = ModeModel {
            label,
            system,
            process_noise,
            measurement_noise,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }
    pub fn input_dim(&self) -> usize {
        self.system.input_dim()
    }
    pub fn output_dim(&self) -> usize {
        self.system.output_dim()
    }
    pub fn attack_dim(&self) -> usize {
        self.input_dim() + self.output_dim()
    }

    pub fn attacks(&self) -> &AttackLocationSet {
        &self.label.attacks
    }

    pub fn sensor_selection(&self) -> Matrix {
        self.label.attacks.sensor_selection(self.input_dim(), self.output_dim())
    }

    pub fn actuator_selection(&self) -> Matrix {
        self.label.attacks.actuator_selection(self.input_dim(), self.output_dim())
    }

    /// `G = B S`, the attack-to-dynamics Jacobian at `(x, u)`.
    pub fn attack_jacobian(&self, x: &Vector, u: &Vector, t: f64) -> Matrix {
        self.system.input_jacobian(x, u, t) * self.actuator_selection()
    }

    /// Dynamics with the actuator part of the full attack vector `d` applied.
    pub fn attacked_dynamics(&self, x: &Vector, u: &Vector, d: &Vector, t: f64) -> Vector {
        let u_eff = u + self.actuator_selection() * d;
        self.system.dynamics(x, &u_eff, t)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, s, m) = (self.state_dim(), self.input_dim(), self.output_dim());
        if self.process_noise.shape() != (n, n) {
            return Err(Error::dim("process noise", format!("{n}x{n}"), format!("{:?}", self.process_noise.shape())));
        }
        if self.measurement_noise.shape() != (m, m) {
            return Err(Error::dim("measurement noise", format!("{m}x{m}"), format!("{:?}", self.measurement_noise.shape())));
        }
        if let Some(bad) = self.label.attacks.indices().find(|&i| i >= s + m) {
            return Err(Error::Domain(format!("attack location {bad} outside 0..{}", s + m)));
        }
        let scale = self.process_noise.amax().max(1e-300);
        if min_eigenvalue(&self.process_noise) < -1e-12 * scale {
            return Err(Error::Domain("process noise covariance must be positive semidefinite".into()));
        }
        if m > 0 && self.measurement_noise.clone().cholesky().is_none() {
            return Err(Error::Domain("measurement noise covariance must be positive definite".into()));
        }
        Ok(())
    }
}
