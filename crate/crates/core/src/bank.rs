//! Bank of per-mode estimators with Bayesian mode posteriors.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttackLocationSet, ModeLabel, ModeModel};
use crate::nise::{init_filter_with_tol, nise_step, FilterState, NiseConfig};
use crate::numerics::{chi_square_quantile, pinv_det_log, Matrix, Vector};
use crate::reduction::true_mode_estimation;

/// How the selected mode's attack estimate is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceRule {
    /// Joint chi-square tests on `d1` and `d2`; demote to the attack-free
    /// variant when both are below threshold.
    #[default]
    ChiSquare,
    /// Per-location z-tests; the reported attack set is the set of
    /// significant locations.
    Elementwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    /// Posterior floor `delta`.
    pub delta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub rule: SignificanceRule,
    pub nise: NiseConfig,
}

impl BankConfig {
    pub fn new(dt: f64) -> Self {
        BankConfig {
            delta: 0.033,
            alpha1: 0.75,
            alpha2: 0.75,
            rule: SignificanceRule::ChiSquare,
            nise: NiseConfig::new(dt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BankState {
    pub filters: Vec<FilterState>,
    pub posteriors: Vec<f64>,
    pub selected: usize,
    pub reported: ModeLabel,
    pub step: usize,
    pub time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BankFlags {
    /// Every likelihood underflowed; posteriors were carried over.
    pub posterior_underflow: bool,
    /// Modes whose filter failed this step.
    pub quarantined: Vec<usize>,
    /// The selected mode had no attack-free variant in the set.
    pub attack_free_missing: bool,
}

/// Output of one bank step.
#[derive(Debug, Clone)]
pub struct JointEstimate {
    pub step: usize,
    pub time: f64,
    pub selected: usize,
    /// Reported mode label after the significance test.
    pub mode: ModeLabel,
    /// Index of the reported label in the mode set, if present.
    pub mode_id: Option<usize>,
    pub x_hat: Vector,
    pub p_x: Matrix,
    /// `d1_k` of the selected mode; zero when not significant.
    pub d1_hat: Vector,
    /// `d2_{k-1}` of the selected mode; zero when not significant.
    pub d2_hat: Vector,
    /// `V1 d1_k` in attack-location coordinates (length `s + m`).
    pub attack_now: Vector,
    /// `V2 d2_{k-1}` in attack-location coordinates.
    pub attack_prev: Vector,
    /// Standard deviations of `attack_now` and `attack_prev` elements.
    pub attack_now_std: Vector,
    pub attack_prev_std: Vector,
    pub posteriors: Vec<f64>,
    pub attack_significant: bool,
    pub flags: BankFlags,
}

/// Starts every filter from the same prior with uniform mode probabilities.
pub fn init_bank(models: &[ModeModel], x0: &Vector, p0: &Matrix, y0: &Vector, u0: &Vector, t0: f64, cfg: &BankConfig) -> Result<BankState> {
    if models.is_empty() {
        return Err(Error::Domain("mode set is empty".into()));
    }
    check_config(cfg, models.len())?;
    let filters = models
        .iter()
        .enumerate()
        .map(|(j, md)| init_filter_with_tol(md, x0, p0, y0, u0, t0, cfg.nise.rank_tol).map_err(|e| e.in_mode(j)))
        .collect::<Result<Vec<_>>>()?;
    let n = models.len();
    Ok(BankState {
        filters,
        posteriors: vec![1.0 / n as f64; n],
        selected: 0,
        reported: models[0].label.clone(),
        step: 0,
        time: t0,
    })
}

fn check_config(cfg: &BankConfig, modes: usize) -> Result<()> {
    if !(cfg.delta > 0.0 && cfg.delta * (modes as f64) < 1.0) {
        return Err(Error::Domain(format!(
            "posterior floor {} must lie in (0, 1/{modes})",
            cfg.delta
        )));
    }
    for a in [cfg.alpha1, cfg.alpha2] {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Domain(format!("significance level {a} outside (0, 1)")));
        }
    }
    Ok(())
}

/// Bayes update in log space followed by the floor and renormalisation.
///
/// Returns `None` when no likelihood is usable (all `-inf` or NaN).
pub fn update_posteriors(prior: &[f64], log_likelihoods: &[f64], delta: f64) -> Option<Vec<f64>> {
    assert_eq!(prior.len(), log_likelihoods.len());
    let logs: Vec<f64> = prior
        .iter()
        .zip(log_likelihoods)
        .map(|(&p, &l)| if l.is_nan() || p <= 0.0 { f64::NEG_INFINITY } else { l + p.ln() })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let floored: Vec<f64> = weights.iter().map(|w| (w / total).max(delta)).collect();
    let norm: f64 = floored.iter().sum();
    Some(floored.iter().map(|w| w / norm).collect())
}

/// Argmax with ties going to the lowest index.
pub fn select_mode(posteriors: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in posteriors.iter().enumerate() {
        if p > posteriors[best] {
            best = j;
        }
    }
    best
}

fn quadratic_below(d: &Vector, p: &Matrix, alpha: f64) -> Result<bool> {
    if d.is_empty() {
        return Ok(true);
    }
    let (pinv, _, _) = pinv_det_log(p)?;
    let q = d.dot(&(&pinv * d));
    Ok(q < chi_square_quantile(d.len(), alpha)?)
}

/// True unless both quadratic forms fall strictly below their chi-square
/// thresholds.
pub fn significance_test(d1: &Vector, p_d1: &Matrix, d2: &Vector, p_d2: &Matrix, alpha1: f64, alpha2: f64) -> Result<bool> {
    Ok(!(quadratic_below(d1, p_d1, alpha1)? && quadratic_below(d2, p_d2, alpha2)?))
}

/// Position of the attack-free variant of `label` in `models`.
pub fn attack_free_variant(models: &[ModeModel], label: &ModeLabel) -> Option<usize> {
    models
        .iter()
        .position(|m| m.label.structure == label.structure && m.label.attacks.is_empty())
}

fn diag_std(p: &Matrix) -> Vector {
    Vector::from_iterator(p.nrows(), (0..p.nrows()).map(|i| p[(i, i)].max(0.0).sqrt()))
}

/// One bank step: all filters, posteriors, selection and significance test.
pub fn nisme_step(
    bank: &BankState,
    models: &[ModeModel],
    y: &Vector,
    u_prev: &Vector,
    u_now: &Vector,
    cfg: &BankConfig,
) -> Result<(BankState, JointEstimate)> {
    if models.len() != bank.filters.len() {
        return Err(Error::dim("nisme_step modes", bank.filters.len(), models.len()));
    }
    check_config(cfg, models.len())?;
    let outputs: Vec<Result<_>> = models
        .par_iter()
        .zip(bank.filters.par_iter())
        .map(|(md, f)| nise_step(f, md, y, u_prev, u_now, &cfg.nise))
        .collect();

    let mut flags = BankFlags::default();
    let mut log_liks = Vec::with_capacity(models.len());
    let mut steps = Vec::with_capacity(models.len());
    for (j, out) in outputs.into_iter().enumerate() {
        match out {
            Ok(o) => {
                log_liks.push(o.log_likelihood);
                steps.push(Some(o));
            }
            Err(e) => {
                warn!("mode {j} quarantined at step {}: {e}", bank.step + 1);
                flags.quarantined.push(j);
                log_liks.push(f64::NEG_INFINITY);
                steps.push(None);
            }
        }
    }

    let posteriors = match update_posteriors(&bank.posteriors, &log_liks, cfg.delta) {
        Some(p) => p,
        None => {
            flags.posterior_underflow = true;
            warn!("all mode likelihoods unusable at step {}", bank.step + 1);
            bank.posteriors.clone()
        }
    };
    let mut selected = select_mode(&posteriors);
    if steps[selected].is_none() {
        // Quarantined filters cannot supply estimates.
        match (0..models.len()).filter(|&j| steps[j].is_some()).max_by(|&a, &b| {
            posteriors[a].partial_cmp(&posteriors[b]).unwrap().then(b.cmp(&a))
        }) {
            Some(j) => selected = j,
            None => {
                return Err(Error::Divergence {
                    time: bank.time + cfg.nise.dt,
                    what: "every mode filter failed".into(),
                })
            }
        }
    }

    let sel = steps[selected].as_ref().unwrap().state.clone();
    let mut filters = Vec::with_capacity(models.len());
    for (j, out) in steps.into_iter().enumerate() {
        match out {
            Some(o) => filters.push(o.state),
            None => {
                // Restart the failed filter from the selected estimate.
                let f = init_filter_with_tol(&models[j], &sel.x_hat, &sel.p_x, y, u_now, sel.time, cfg.nise.rank_tol)
                    .map_err(|e| e.in_mode(j))?;
                filters.push(f);
            }
        }
    }

    let t = &sel.transforms;
    let p_now = &t.v1 * &sel.p_d1 * t.v1.transpose();
    let p_prev = &t.v2 * &sel.p_d2 * t.v2.transpose();
    let mut attack_now = &t.v1 * &sel.d1_hat;
    let mut attack_prev = if sel.d2_hat.len() == t.v2.ncols() {
        &t.v2 * &sel.d2_hat
    } else {
        Vector::zeros(t.v1.nrows())
    };
    let mut d1_hat = sel.d1_hat.clone();
    let mut d2_hat = sel.d2_hat.clone();

    let (mode, attack_significant) = match cfg.rule {
        SignificanceRule::ChiSquare => {
            let significant = significance_test(&sel.d1_hat, &sel.p_d1, &sel.d2_hat, &sel.p_d2, cfg.alpha1, cfg.alpha2)?;
            let label = &models[selected].label;
            if significant {
                (label.clone(), true)
            } else {
                if attack_free_variant(models, label).is_none() {
                    flags.attack_free_missing = true;
                }
                d1_hat.fill(0.0);
                d2_hat.fill(0.0);
                attack_now.fill(0.0);
                attack_prev.fill(0.0);
                (label.attack_free(), false)
            }
        }
        SignificanceRule::Elementwise => {
            let est = true_mode_estimation(
                &models[selected].label,
                &attack_now,
                &p_now,
                &attack_prev,
                &p_prev,
                cfg.alpha1,
                cfg.alpha2,
            )?;
            attack_now = est.attack_now;
            attack_prev = est.attack_prev;
            d1_hat = t.v1.transpose() * &attack_now;
            if d2_hat.len() == t.v2.ncols() {
                d2_hat = t.v2.transpose() * &attack_prev;
            }
            let significant = !est.label.attacks.is_empty();
            (est.label, significant)
        }
    };
    let mode_id = models.iter().position(|m| m.label == mode);

    let estimate = JointEstimate {
        step: bank.step + 1,
        time: sel.time,
        selected,
        mode: mode.clone(),
        mode_id,
        x_hat: sel.x_hat.clone(),
        p_x: sel.p_x.clone(),
        d1_hat,
        d2_hat,
        attack_now,
        attack_prev,
        attack_now_std: diag_std(&p_now),
        attack_prev_std: diag_std(&p_prev),
        posteriors: posteriors.clone(),
        attack_significant,
        flags,
    };
    let next = BankState {
        filters,
        posteriors,
        selected,
        reported: mode,
        step: bank.step + 1,
        time: sel.time,
    };
    Ok((next, estimate))
}

/// Labels of a full mode set: every structure paired with every subset of the
/// candidate attack locations.
pub fn product_labels(structures: usize, candidates: &[usize]) -> Vec<ModeLabel> {
    let sets = AttackLocationSet::power_set(candidates);
    (0..structures)
        .flat_map(|s| sets.iter().map(move |a| ModeLabel::new(s, a.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn equal_likelihoods_keep_posteriors() {
        let prior = [0.1, 0.2, 0.3, 0.4];
        let p = update_posteriors(&prior, &[-3.0; 4], 0.01).unwrap();
        for (a, b) in p.iter().zip(prior) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_winner_is_floored() {
        let delta = 0.033;
        let p = update_posteriors(&[0.25; 4], &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], delta).unwrap();
        let dp = delta / (1.0 + 3.0 * delta);
        assert_abs_diff_eq!(p[0], 1.0 - 3.0 * dp, epsilon = 1e-15);
        for v in &p[1..] {
            assert_abs_diff_eq!(*v, dp, epsilon = 1e-15);
        }
    }

    #[test]
    fn all_underflow_returns_none() {
        assert!(update_posteriors(&[0.5, 0.5], &[f64::NEG_INFINITY; 2], 0.01).is_none());
    }

    #[test]
    fn large_log_likelihoods_do_not_overflow() {
        let p = update_posteriors(&[0.5, 0.5], &[2000.0, 1990.0], 1e-6).unwrap();
        assert_abs_diff_eq!(p[0] + p[1], 1.0, epsilon = 1e-15);
        assert!(p[0] > 0.9999);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(select_mode(&[0.7, 0.1, 0.1, 0.1]), 0);
        assert_eq!(select_mode(&[0.5, 0.5]), 0);
        assert_eq!(select_mode(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn significance_boundaries() {
        let e = Vector::zeros(0);
        let ee = Matrix::zeros(0, 0);
        assert!(!significance_test(&Vector::zeros(2), &Matrix::identity(2, 2), &e, &ee, 0.75, 0.75).unwrap());
        let d = Vector::from_vec(vec![10f64.sqrt(), 0.0, 0.0]);
        assert!(significance_test(&d, &Matrix::identity(3, 3), &e, &ee, 0.75, 0.75).unwrap());
        let thr = chi_square_quantile(1, 0.75).unwrap();
        let d = Vector::from_vec(vec![thr.sqrt()]);
        let q = d[0] * d[0];
        let on_boundary = significance_test(&d, &Matrix::identity(1, 1), &e, &ee, 0.75, 0.75).unwrap();
        assert_eq!(on_boundary, q >= thr);
    }

    #[test]
    fn product_label_count() {
        assert_eq!(product_labels(4, &[0, 1, 2, 3, 4, 5]).len(), 256);
    }
}
