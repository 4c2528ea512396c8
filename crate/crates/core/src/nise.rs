//! Single-mode recursive estimator of the state and the attack vector.
//!
//! One step consumes `y_k` and the input held over `(t_{k-1}, t_k]` and
//! runs, in order: transform construction, the `d2_{k-1}` estimate from
//! `z2`, state prediction through the continuous dynamics, the state update
//! from `z3`, the `d1_k` estimate from `z1`, and the mode likelihood from the
//! `z3` innovation.

use serde::{Deserialize, Serialize};

use crate::decomposition::{
    build_transforms_with_tol, decompose_noise, decompose_output, DecomposedNoise, DecompositionTransforms,
};
use crate::error::{Error, Result};
use crate::model::ModeModel;
use crate::numerics::{min_eigenvalue, pinv_det_log, symmetrize, Matrix, Vector, DEFAULT_RANK_TOL};
use crate::ode::{integrate, Integrator};

/// Lower clamp on the log-likelihood before exponentiation.
pub const LOG_LIKELIHOOD_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NiseConfig {
    /// Sampling period `eps` in seconds.
    pub dt: f64,
    /// Integrator substeps per sampling period for the state prediction.
    pub substeps: usize,
    pub integrator: Integrator,
    pub rank_tol: f64,
}

impl NiseConfig {
    pub fn new(dt: f64) -> Self {
        NiseConfig {
            dt,
            substeps: 1,
            integrator: Integrator::Rk4,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("sampling period must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Per-mode estimator state after step `k`.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub x_hat: Vector,
    pub p_x: Matrix,
    pub d1_hat: Vector,
    pub p_d1: Matrix,
    pub p_xd1: Matrix,
    /// `d2` estimate of the previous step, produced during step `k`.
    pub d2_hat: Vector,
    pub p_d2: Matrix,
    pub step: usize,
    /// `t_k`.
    pub time: f64,
    /// Transforms used for the most recent step.
    pub transforms: DecompositionTransforms,
}

impl FilterState {
    /// Attack estimate in location coordinates, `V1 d1 + V2 d2`.
    pub fn attack_estimate(&self) -> Vector {
        let t = &self.transforms;
        let mut d = &t.v1 * &self.d1_hat;
        if self.d2_hat.len() == t.v2.ncols() {
            d += &t.v2 * &self.d2_hat;
        }
        d
    }

    /// Covariance of [`attack_estimate`](Self::attack_estimate), ignoring the
    /// cross term between the two components.
    pub fn attack_covariance(&self) -> Matrix {
        let t = &self.transforms;
        let mut p = &t.v1 * &self.p_d1 * t.v1.transpose();
        if self.p_d2.nrows() == t.v2.ncols() {
            p += &t.v2 * &self.p_d2 * t.v2.transpose();
        }
        p
    }
}

/// Per-step consistency figures.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepDiagnostics {
    /// `max |M1 H1 - I|` (0 when `p1 = 0`).
    pub d1_gain_error: f64,
    /// `max |eps M2 C2 G2 - I|` (0 when `p2 = 0`).
    pub d2_gain_error: f64,
    /// Smallest eigenvalue of `P_{k|k-1}`.
    pub min_prior_eig: f64,
    /// True when every output is attacked and the update was skipped.
    pub update_skipped: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: FilterState,
    pub innovation: Vector,
    pub innovation_cov: Matrix,
    pub likelihood: f64,
    pub log_likelihood: f64,
    pub effective_rank: usize,
    pub prior_state: Vector,
    pub prior_cov: Matrix,
    pub diagnostics: StepDiagnostics,
}

/// Quantities linearised at the previous estimate.
#[derive(Debug, Clone)]
pub struct PriorLinearization {
    /// `A_{k-1}`.
    pub a: Matrix,
    /// `G_{k-1} = B_{k-1} S`.
    pub g: Matrix,
    /// Output Jacobian at `x_{k-1|k-1}`.
    pub c_prev: Matrix,
    /// `x_{k-1|k-1} + eps f(x_{k-1|k-1}, u_{k-1}, d1_{k-1})`.
    pub x_euler: Vector,
}

/// Gaussian density of the innovation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub value: f64,
    pub log_value: f64,
    pub rank: usize,
}

fn check_len(context: &'static str, v: &Vector, n: usize) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::dim(context, n, v.len()))
    }
}

/// Starts a filter at `k = 0` with `d1_0 = Sigma^-1 (z1_0 - h1(x0, u0))`.
pub fn init_filter(model: &ModeModel, x0: &Vector, p0: &Matrix, y0: &Vector, u0: &Vector, t0: f64) -> Result<FilterState> {
    init_filter_with_tol(model, x0, p0, y0, u0, t0, DEFAULT_RANK_TOL)
}

pub fn init_filter_with_tol(
    model: &ModeModel,
    x0: &Vector,
    p0: &Matrix,
    y0: &Vector,
    u0: &Vector,
    t0: f64,
    rank_tol: f64,
) -> Result<FilterState> {
    let (n, s, m) = (model.state_dim(), model.input_dim(), model.output_dim());
    check_len("init x0", x0, n)?;
    check_len("init y0", y0, m)?;
    check_len("init u0", u0, s)?;
    if p0.shape() != (n, n) {
        return Err(Error::dim("init P0", format!("{n}x{n}"), format!("{:?}", p0.shape())));
    }
    if min_eigenvalue(p0) < -1e-12 * p0.amax().max(1e-300) {
        return Err(Error::Domain("initial covariance must be positive semidefinite".into()));
    }
    let c = model.system.output_jacobian(x0, u0, t0);
    let transforms = build_transforms_with_tol(
        &model.sensor_selection(),
        &model.measurement_noise,
        &c,
        &Matrix::zeros(n, s + m),
        rank_tol,
    )?;
    let z = decompose_output(y0, &transforms)?;
    let noise = decompose_noise(&model.measurement_noise, &transforms)?;
    let h0 = model.system.output(x0, u0, t0);
    let (d1_hat, p_d1, p_xd1) = d1_from(&transforms, &noise, &c, &z.z1, &h0, p0);
    Ok(FilterState {
        x_hat: x0.clone(),
        p_x: symmetrize(p0),
        d1_hat,
        p_d1,
        p_xd1,
        d2_hat: Vector::zeros(0),
        p_d2: Matrix::zeros(0, 0),
        step: 0,
        time: t0,
        transforms,
    })
}

/// Linearises the dynamics at the previous estimate and forms the Euler
/// predictor used by the `d2` estimate.
pub fn linearize_prior(prev: &FilterState, model: &ModeModel, u_prev: &Vector, dt: f64) -> Result<PriorLinearization> {
    check_len("u_prev", u_prev, model.input_dim())?;
    let t = prev.time;
    let d1_full = &prev.transforms.v1 * &prev.d1_hat;
    let u_eff = u_prev + model.actuator_selection() * &d1_full;
    let a = model.system.state_jacobian(&prev.x_hat, &u_eff, t);
    let g = model.system.input_jacobian(&prev.x_hat, &u_eff, t) * model.actuator_selection();
    let c_prev = model.system.output_jacobian(&prev.x_hat, u_prev, t);
    let x_euler = &prev.x_hat + model.system.dynamics(&prev.x_hat, &u_eff, t) * dt;
    if !x_euler.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence {
            time: t,
            what: "non-finite Euler predictor".into(),
        });
    }
    Ok(PriorLinearization { a, g, c_prev, x_euler })
}

fn m2_of(t: &DecompositionTransforms, dt: f64) -> Result<Matrix> {
    if t.sigma_bar.iter().any(|&s| s.is_nan() || s <= 0.0 || !(1.0 / s).is_finite()) {
        return Err(Error::Numerical("Sigma_bar is numerically singular".into()));
    }
    Ok(Matrix::from_diagonal(&t.sigma_bar.map(|s| 1.0 / (dt * s))))
}

fn m1_of(t: &DecompositionTransforms) -> Result<Matrix> {
    if t.sigma.iter().any(|&s| s.is_nan() || s <= 0.0 || !(1.0 / s).is_finite()) {
        return Err(Error::Numerical("Sigma is numerically singular".into()));
    }
    Ok(t.sigma_inverse())
}

/// Estimates `d2_{k-1}` from `z2_k`.
///
/// `c_now` is the output Jacobian at step `k`. Returns empty results when
/// `rank(Sigma_bar) = 0`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_d2(
    prev: &FilterState,
    model: &ModeModel,
    lin: &PriorLinearization,
    transforms: &DecompositionTransforms,
    noise: &DecomposedNoise,
    c_now: &Matrix,
    z2: &Vector,
    u_now: &Vector,
    t_now: f64,
    dt: f64,
) -> Result<(Vector, Matrix)> {
    let p2 = transforms.p2();
    check_len("z2", z2, p2)?;
    if p2 == 0 {
        return Ok((Vector::zeros(0), Matrix::zeros(0, 0)));
    }
    let m2 = m2_of(transforms, dt)?;
    let c2 = transforms.z2_map() * c_now;
    let h_pred = model.system.output(&lin.x_euler, u_now, t_now);
    let d2 = &m2 * (z2 - transforms.z2_map() * h_pred);

    let n = model.state_dim();
    let k2 = &m2 * &c2;
    let f = Matrix::identity(n, n) + &lin.a * dt;
    let g1 = &lin.g * &transforms.v1;
    let k2f = &k2 * &f;
    let k2g1 = &k2 * &g1;
    let cross = &k2f * &prev.p_xd1 * k2g1.transpose() * dt;
    let p = &k2f * &prev.p_x * k2f.transpose()
        + &k2 * &model.process_noise * k2.transpose() * (dt * dt)
        + &m2 * &noise.r2 * m2.transpose()
        + &k2g1 * &prev.p_d1 * k2g1.transpose() * (dt * dt)
        + &cross
        + cross.transpose();
    Ok((d2, symmetrize(&p)))
}

/// Closed-loop propagation matrices `(A_bar, Q_bar)` for one step.
pub fn propagation_matrices(
    model: &ModeModel,
    lin: &PriorLinearization,
    transforms: &DecompositionTransforms,
    noise: &DecomposedNoise,
    c_now: &Matrix,
    dt: f64,
) -> Result<(Matrix, Matrix)> {
    let n = model.state_dim();
    let eye = Matrix::identity(n, n);
    let g1 = &lin.g * &transforms.v1;
    let g2 = &lin.g * &transforms.v2;
    let (proj, d2_noise) = if transforms.p2() > 0 {
        let m2 = m2_of(transforms, dt)?;
        let c2 = transforms.z2_map() * c_now;
        let g2m2 = &g2 * &m2;
        (&eye - &g2m2 * &c2 * dt, &g2m2 * &noise.r2 * g2m2.transpose() * (dt * dt))
    } else {
        (eye.clone(), Matrix::zeros(n, n))
    };
    let (d1_feedback, d1_noise) = if transforms.p1() > 0 {
        let m1 = m1_of(transforms)?;
        let g1m1 = &g1 * &m1;
        let c1_prev = &transforms.t1 * &lin.c_prev;
        (&g1m1 * c1_prev * dt, &g1m1 * &noise.r1 * g1m1.transpose())
    } else {
        (Matrix::zeros(n, n), Matrix::zeros(n, n))
    };
    let a_bar = &proj * (&eye + &lin.a * dt - d1_feedback);
    let q_bar = &proj * (&model.process_noise + d1_noise) * proj.transpose() * (dt * dt) + d2_noise;
    Ok((a_bar, symmetrize(&q_bar)))
}

/// Integrates the dynamics over one sampling period with `d1` and `d2` held
/// constant and propagates the covariance through `A_bar`.
#[allow(clippy::too_many_arguments)]
pub fn predict_state(
    prev: &FilterState,
    model: &ModeModel,
    lin: &PriorLinearization,
    transforms: &DecompositionTransforms,
    noise: &DecomposedNoise,
    c_now: &Matrix,
    d2: &Vector,
    u_prev: &Vector,
    cfg: &NiseConfig,
) -> Result<(Vector, Matrix)> {
    cfg.check()?;
    check_len("d2", d2, transforms.p2())?;
    let d1_full = &transforms.v1 * &prev.d1_hat;
    let u_eff = u_prev + model.actuator_selection() * &d1_full;
    let forcing = &lin.g * &transforms.v2 * d2;
    let x_pred = integrate(
        cfg.integrator,
        |t, x| model.system.dynamics(x, &u_eff, t) + &forcing,
        prev.time,
        &prev.x_hat,
        cfg.dt,
        cfg.substeps,
    )?;
    let (a_bar, q_bar) = propagation_matrices(model, lin, transforms, noise, c_now, cfg.dt)?;
    let p_pred = symmetrize(&(&a_bar * &prev.p_x * a_bar.transpose() + q_bar));
    Ok((x_pred, p_pred))
}

/// Result of the `z3` correction.
#[derive(Debug, Clone)]
pub struct StateUpdate {
    pub x_hat: Vector,
    pub p_x: Matrix,
    pub innovation: Vector,
    pub innovation_cov: Matrix,
}

/// Kalman correction with `z3`; Joseph-form covariance.
#[allow(clippy::too_many_arguments)]
pub fn update_state(
    x_pred: &Vector,
    p_pred: &Matrix,
    model: &ModeModel,
    transforms: &DecompositionTransforms,
    noise: &DecomposedNoise,
    z3: &Vector,
    u_now: &Vector,
    t_now: f64,
) -> Result<StateUpdate> {
    let p3 = transforms.p3();
    check_len("z3", z3, p3)?;
    if p3 == 0 {
        return Ok(StateUpdate {
            x_hat: x_pred.clone(),
            p_x: p_pred.clone(),
            innovation: Vector::zeros(0),
            innovation_cov: Matrix::zeros(0, 0),
        });
    }
    let n = x_pred.len();
    let map = transforms.z3_map();
    let c3 = &map * model.system.output_jacobian(x_pred, u_now, t_now);
    let innovation = z3 - &map * model.system.output(x_pred, u_now, t_now);
    let s = symmetrize(&(&c3 * p_pred * c3.transpose() + &noise.r3));
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?;
    let gain = chol.solve(&(&c3 * p_pred)).transpose();
    let x_hat = x_pred + &gain * &innovation;
    let i_lc = Matrix::identity(n, n) - &gain * &c3;
    let p_x = symmetrize(&(&i_lc * p_pred * i_lc.transpose() + &gain * &noise.r3 * gain.transpose()));
    Ok(StateUpdate {
        x_hat,
        p_x,
        innovation,
        innovation_cov: s,
    })
}

fn d1_from(
    t: &DecompositionTransforms,
    noise: &DecomposedNoise,
    c1_full: &Matrix,
    z1: &Vector,
    h: &Vector,
    p_x: &Matrix,
) -> (Vector, Matrix, Matrix) {
    let n = p_x.nrows();
    if t.p1() == 0 {
        return (Vector::zeros(0), Matrix::zeros(0, 0), Matrix::zeros(n, 0));
    }
    let m1 = t.sigma_inverse();
    let m1c1 = &m1 * &t.t1 * c1_full;
    let d1 = &m1 * (z1 - &t.t1 * h);
    let p_d1 = symmetrize(&(&m1c1 * p_x * m1c1.transpose() + &m1 * &noise.r1 * m1.transpose()));
    let p_xd1 = -(p_x * m1c1.transpose());
    (d1, p_d1, p_xd1)
}

/// Estimates `d1_k` from `z1_k` at the corrected state.
///
/// `c_now` is the output Jacobian at `x_{k|k-1}`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_d1(
    x_hat: &Vector,
    p_x: &Matrix,
    model: &ModeModel,
    transforms: &DecompositionTransforms,
    noise: &DecomposedNoise,
    c_now: &Matrix,
    z1: &Vector,
    u_now: &Vector,
    t_now: f64,
) -> Result<(Vector, Matrix, Matrix)> {
    check_len("z1", z1, transforms.p1())?;
    if transforms.p1() > 0 {
        m1_of(transforms)?;
    }
    let h = model.system.output(x_hat, u_now, t_now);
    Ok(d1_from(transforms, noise, c_now, z1, &h, p_x))
}

/// Gaussian likelihood of the innovation on the numerical rank of its
/// covariance. An empty innovation has likelihood 1.
pub fn likelihood(innovation: &Vector, innovation_cov: &Matrix) -> Result<Likelihood> {
    if innovation.len() != innovation_cov.nrows() {
        return Err(Error::dim("likelihood", innovation_cov.nrows(), innovation.len()));
    }
    if innovation.is_empty() {
        return Ok(Likelihood {
            value: 1.0,
            log_value: 0.0,
            rank: 0,
        });
    }
    let (pinv, log_det, rank) = pinv_det_log(innovation_cov)?;
    let quad = innovation.dot(&(&pinv * innovation));
    let log_value = -0.5 * (rank as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    Ok(Likelihood {
        value: log_value.max(LOG_LIKELIHOOD_FLOOR).exp(),
        log_value,
        rank,
    })
}

/// One full estimator step from `k-1` to `k`.
///
/// `u_prev` is held over `(t_{k-1}, t_k]`; `u_now` is the input at `t_k`.
pub fn nise_step(
    prev: &FilterState,
    model: &ModeModel,
    y: &Vector,
    u_prev: &Vector,
    u_now: &Vector,
    cfg: &NiseConfig,
) -> Result<StepOutput> {
    cfg.check()?;
    check_len("y", y, model.output_dim())?;
    check_len("u_now", u_now, model.input_dim())?;
    let dt = cfg.dt;
    let t_now = prev.time + dt;

    let lin = linearize_prior(prev, model, u_prev, dt)?;
    let c_euler = model.system.output_jacobian(&lin.x_euler, u_now, t_now);
    let transforms =
        build_transforms_with_tol(&model.sensor_selection(), &model.measurement_noise, &c_euler, &lin.g, cfg.rank_tol)?;
    let z = decompose_output(y, &transforms)?;
    let noise = decompose_noise(&model.measurement_noise, &transforms)?;

    let (d2_hat, p_d2) = estimate_d2(prev, model, &lin, &transforms, &noise, &c_euler, &z.z2, u_now, t_now, dt)?;
    let (x_pred, p_pred) = predict_state(prev, model, &lin, &transforms, &noise, &c_euler, &d2_hat, u_prev, cfg)?;

    let min_prior_eig = min_eigenvalue(&p_pred);
    if min_prior_eig < -1e-9 * p_pred.amax().max(1e-300) {
        return Err(Error::Numerical(format!("prior covariance lost positivity (min eig {min_prior_eig:e})")));
    }

    let upd = update_state(&x_pred, &p_pred, model, &transforms, &noise, &z.z3, u_now, t_now)?;
    let c_pred = model.system.output_jacobian(&x_pred, u_now, t_now);
    let (d1_hat, p_d1, p_xd1) =
        estimate_d1(&upd.x_hat, &upd.p_x, model, &transforms, &noise, &c_pred, &z.z1, u_now, t_now)?;
    let lik = likelihood(&upd.innovation, &upd.innovation_cov)?;

    let diagnostics = StepDiagnostics {
        d1_gain_error: d1_gain_error(model, &transforms),
        d2_gain_error: d2_gain_error(&transforms, &c_euler, &lin.g, dt),
        min_prior_eig,
        update_skipped: transforms.p3() == 0,
    };
    if !upd.x_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence {
            time: t_now,
            what: "state estimate is not finite".into(),
        });
    }

    Ok(StepOutput {
        state: FilterState {
            x_hat: upd.x_hat,
            p_x: upd.p_x,
            d1_hat,
            p_d1,
            p_xd1,
            d2_hat,
            p_d2,
            step: prev.step + 1,
            time: t_now,
            transforms,
        },
        innovation: upd.innovation,
        innovation_cov: upd.innovation_cov,
        likelihood: lik.value,
        log_likelihood: lik.log_value,
        effective_rank: lik.rank,
        prior_state: x_pred,
        prior_cov: p_pred,
        diagnostics,
    })
}

/// `max |M1 H1 - I|` with `H1 = T1 H V1` computed from the transforms.
pub fn d1_gain_error(model: &ModeModel, t: &DecompositionTransforms) -> f64 {
    if t.p1() == 0 {
        return 0.0;
    }
    let h1 = &t.t1 * model.sensor_selection() * &t.v1;
    (t.sigma_inverse() * h1 - Matrix::identity(t.p1(), t.p1())).amax()
}

/// `max |eps M2 C2 G2 - I|` with `C2 = Tbar1 T2 C` and `G2 = G V2`.
pub fn d2_gain_error(t: &DecompositionTransforms, c: &Matrix, g: &Matrix, dt: f64) -> f64 {
    if t.p2() == 0 {
        return 0.0;
    }
    let Ok(m2) = m2_of(t, dt) else {
        return f64::INFINITY;
    };
    let c2g2 = t.z2_map() * c * g * &t.v2;
    (m2 * c2g2 * dt - Matrix::identity(t.p2(), t.p2())).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttackLocationSet, LinearSystem, ModeLabel};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn model(a: Matrix, b: Matrix, c: Matrix, attacks: &[usize], q: f64, r: f64) -> ModeModel {
        let (n, m) = (a.nrows(), c.nrows());
        ModeModel::new(
            ModeLabel::new(0, AttackLocationSet::from_indices(attacks.iter().copied())),
            Arc::new(LinearSystem::new(a, b, c)),
            Matrix::identity(n, n) * q,
            Matrix::identity(m, m) * r,
        )
        .unwrap()
    }

    #[test]
    fn likelihood_standard_cases() {
        let l = likelihood(&Vector::zeros(2), &Matrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(l.value, 1.0 / (2.0 * std::f64::consts::PI), epsilon = 1e-15);
        let l = likelihood(&Vector::from_vec(vec![1.0, 0.0]), &Matrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(l.value, (-0.5f64).exp() / (2.0 * std::f64::consts::PI), epsilon = 1e-15);
    }

    #[test]
    fn likelihood_rank_deficient_is_marginal() {
        let cov = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        let l = likelihood(&Vector::from_vec(vec![1.0, 0.0]), &cov).unwrap();
        let oracle = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert_eq!(l.rank, 1);
        assert_abs_diff_eq!(l.value, oracle, epsilon = 1e-15);
    }

    #[test]
    fn likelihood_underflow_clamped() {
        let l = likelihood(&Vector::from_vec(vec![1e6]), &Matrix::identity(1, 1)).unwrap();
        assert_eq!(l.value, LOG_LIKELIHOOD_FLOOR.exp());
        assert!(l.log_value < LOG_LIKELIHOOD_FLOOR);
    }

    #[test]
    fn zero_field_prediction_adds_q_bar() {
        let md = model(Matrix::zeros(2, 2), Matrix::zeros(2, 1), Matrix::identity(2, 2), &[], 0.5, 1.0);
        let cfg = NiseConfig::new(0.1);
        let x0 = Vector::from_vec(vec![1.0, 2.0]);
        let p0 = Matrix::identity(2, 2) * 3.0;
        let st = init_filter(&md, &x0, &p0, &Vector::zeros(2), &Vector::zeros(1), 0.0).unwrap();
        let u = Vector::zeros(1);
        let lin = linearize_prior(&st, &md, &u, cfg.dt).unwrap();
        let t = &st.transforms;
        let noise = decompose_noise(&md.measurement_noise, t).unwrap();
        let (x, p) = predict_state(&st, &md, &lin, t, &noise, &lin.c_prev, &Vector::zeros(0), &u, &cfg).unwrap();
        assert_eq!(x, x0);
        assert!((p - (p0 + Matrix::identity(2, 2) * (0.5 * 0.01))).amax() < 1e-15);
    }

    #[test]
    fn constant_d2_forcing_is_euler_exact() {
        // One actuator, no sensor attack, A = 0: x_pred = x + dt G2 d2.
        let b = Matrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let md = model(Matrix::zeros(2, 2), b, Matrix::identity(2, 2), &[0], 0.1, 1.0);
        let cfg = NiseConfig::new(0.05);
        let x0 = Vector::from_vec(vec![1.0, -1.0]);
        let u = Vector::zeros(1);
        let st = init_filter(&md, &x0, &Matrix::identity(2, 2), &x0, &u, 0.0).unwrap();
        let lin = linearize_prior(&st, &md, &u, cfg.dt).unwrap();
        let t = build_transforms_with_tol(&md.sensor_selection(), &md.measurement_noise, &lin.c_prev, &lin.g, 1e-10)
            .unwrap();
        assert_eq!(t.p2(), 1);
        let noise = decompose_noise(&md.measurement_noise, &t).unwrap();
        let d2 = Vector::from_vec(vec![0.7]);
        let (x, _) = predict_state(&st, &md, &lin, &t, &noise, &lin.c_prev, &d2, &u, &cfg).unwrap();
        let expected = &x0 + (&lin.g * &t.v2 * &d2) * cfg.dt;
        assert!((x - expected).amax() < 1e-15);
    }

    #[test]
    fn update_with_zero_output_map_keeps_prior() {
        let md = model(Matrix::zeros(2, 2), Matrix::zeros(2, 1), Matrix::zeros(1, 2), &[], 0.1, 1.0);
        let st = init_filter(&md, &Vector::zeros(2), &Matrix::identity(2, 2), &Vector::zeros(1), &Vector::zeros(1), 0.0)
            .unwrap();
        let noise = decompose_noise(&md.measurement_noise, &st.transforms).unwrap();
        let xp = Vector::from_vec(vec![0.5, 0.25]);
        let pp = Matrix::identity(2, 2) * 2.0;
        let upd = update_state(&xp, &pp, &md, &st.transforms, &noise, &Vector::from_vec(vec![3.0]), &Vector::zeros(1), 0.1)
            .unwrap();
        assert_eq!(upd.x_hat, xp);
        assert!((upd.p_x - pp).amax() < 1e-15);
    }

    #[test]
    fn exact_d1_recovered_from_noise_free_output() {
        let c = Matrix::identity(2, 2);
        let md = model(Matrix::zeros(2, 2), Matrix::zeros(2, 1), c.clone(), &[1], 0.1, 1.0);
        let x = Vector::from_vec(vec![0.3, -0.2]);
        let d_s = 0.125;
        let mut y = &c * &x;
        y[0] += d_s;
        let st = init_filter(&md, &x, &Matrix::zeros(2, 2), &y, &Vector::zeros(1), 0.0).unwrap();
        assert_eq!(st.d1_hat.len(), 1);
        assert_abs_diff_eq!(st.d1_hat[0], d_s, epsilon = 1e-15);
        assert_abs_diff_eq!(st.attack_estimate()[1], d_s, epsilon = 1e-15);
    }

    #[test]
    fn all_outputs_attacked_skips_update() {
        let md = model(Matrix::zeros(1, 1), Matrix::zeros(1, 1), Matrix::identity(1, 1), &[1], 0.1, 1.0);
        let cfg = NiseConfig::new(0.1);
        let u = Vector::zeros(1);
        let st = init_filter(&md, &Vector::zeros(1), &Matrix::identity(1, 1), &Vector::zeros(1), &u, 0.0).unwrap();
        let out = nise_step(&st, &md, &Vector::from_vec(vec![5.0]), &u, &u, &cfg).unwrap();
        assert!(out.diagnostics.update_skipped);
        assert_eq!(out.likelihood, 1.0);
        assert_eq!(out.effective_rank, 0);
        assert_abs_diff_eq!(out.state.d1_hat[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_nonpositive_dt() {
        let md = model(Matrix::zeros(1, 1), Matrix::zeros(1, 1), Matrix::identity(1, 1), &[], 0.1, 1.0);
        let u = Vector::zeros(1);
        let st = init_filter(&md, &Vector::zeros(1), &Matrix::identity(1, 1), &Vector::zeros(1), &u, 0.0).unwrap();
        let cfg = NiseConfig::new(0.0);
        assert!(nise_step(&st, &md, &Vector::zeros(1), &u, &u, &cfg).is_err());
    }
}
