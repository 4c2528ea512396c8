//! Mode-set reduction for linear modes and true-mode recovery by per-location
//! z-tests.
//!
//! A signal mode is dropped when it is not uniformly observable or when a
//! kept mode of the same structure assumes a strict superset of its attack
//! locations. The bank then runs on the survivors and the reported attack set
//! is rebuilt element by element.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::bank::{init_bank, nisme_step, BankConfig, BankState, JointEstimate, SignificanceRule};
use crate::decomposition::{build_transforms_with_tol, decompose_noise};
use crate::error::{Error, Result};
use crate::model::{ModeLabel, ModeModel};
use crate::nise::{propagation_matrices, PriorLinearization};
use crate::numerics::{max_eigenvalue, min_eigenvalue, symmetrize, z_quantile, Matrix, Vector};

pub const DEFAULT_A_TOL: f64 = 1e-8;

/// Step-invariant closed-loop matrices of one linear (or linearised) mode.
#[derive(Debug, Clone)]
pub struct LinearModeData {
    pub label: ModeLabel,
    /// `A_bar`, the estimation-error transition of the mode's filter.
    pub a_bar: Matrix,
    /// `C3 = Tbar2 T2 C`.
    pub c3: Matrix,
}

impl LinearModeData {
    /// Builds the data for a linear mode. Nonlinear modes are rejected.
    pub fn from_model(model: &ModeModel, dt: f64) -> Result<Self> {
        if !model.system.is_linear() {
            return Err(Error::Domain(format!(
                "mode {} is nonlinear; reduction applies to linear modes only",
                model.label
            )));
        }
        let n = model.state_dim();
        let s = model.input_dim();
        Self::linearized_at(model, &Vector::zeros(n), &Vector::zeros(s), 0.0, dt)
    }

    /// Builds the data from the Jacobians of `model` at one operating point.
    ///
    /// The result describes the linearisation, not the nonlinear mode.
    pub fn linearized_at(model: &ModeModel, x: &Vector, u: &Vector, t: f64, dt: f64) -> Result<Self> {
        let a = model.system.state_jacobian(x, u, t);
        let g = model.attack_jacobian(x, u, t);
        let c = model.system.output_jacobian(x, u, t);
        let transforms = build_transforms_with_tol(
            &model.sensor_selection(),
            &model.measurement_noise,
            &c,
            &g,
            crate::numerics::DEFAULT_RANK_TOL,
        )?;
        let noise = decompose_noise(&model.measurement_noise, &transforms)?;
        let lin = PriorLinearization {
            a,
            g,
            c_prev: c.clone(),
            x_euler: x.clone(),
        };
        let (a_bar, _) = propagation_matrices(model, &lin, &transforms, &noise, &c, dt)?;
        Ok(LinearModeData {
            label: model.label.clone(),
            a_bar,
            c3: transforms.z3_map() * c,
        })
    }
}

/// `sum_{i=k}^{k+l} Phi_{i,k}' C3_i' C3_i Phi_{i,k}` where `abar_seq[i]`
/// maps step `i` to step `i + 1` and `Phi_{k,k} = I`.
pub fn observability_gramian(abar_seq: &[Matrix], c3_seq: &[Matrix], k: usize, l: usize) -> Result<Matrix> {
    if c3_seq.len() <= k + l {
        return Err(Error::Domain(format!("output maps cover {} steps, need {}", c3_seq.len(), k + l + 1)));
    }
    if l > 0 && abar_seq.len() < k + l {
        return Err(Error::Domain(format!("transitions cover {} steps, need {}", abar_seq.len(), k + l)));
    }
    let n = c3_seq[k].ncols();
    let mut phi = Matrix::identity(n, n);
    let mut gram = Matrix::zeros(n, n);
    for i in k..=k + l {
        let c = &c3_seq[i];
        if c.ncols() != n {
            return Err(Error::dim("observability_gramian C3", n, c.ncols()));
        }
        let cp = c * &phi;
        gram += cp.transpose() * cp;
        if i < k + l {
            let a = &abar_seq[i];
            if a.shape() != (n, n) {
                return Err(Error::dim("observability_gramian A_bar", format!("{n}x{n}"), format!("{:?}", a.shape())));
            }
            phi = a * phi;
        }
    }
    Ok(symmetrize(&gram))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservabilityReport {
    pub c1: usize,
    pub c2: usize,
    pub l: usize,
    pub min_gramian_eig: f64,
    pub max_gramian_eig: f64,
    pub observable: bool,
}

/// Uniform observability of a step-invariant mode over `[c1, c2]`.
///
/// With constant `A_bar` and `C3` every window start gives the same Gramian,
/// so one evaluation covers the range.
pub fn check_uniform_observability(data: &LinearModeData, c1: usize, c2: usize, l: usize, a_tol: f64) -> Result<ObservabilityReport> {
    if c2 <= c1 || l >= c2 - c1 {
        return Err(Error::Domain(format!("horizon {l} must be shorter than the window [{c1}, {c2}]")));
    }
    let abar = vec![data.a_bar.clone(); l];
    let c3 = vec![data.c3.clone(); l + 1];
    let gram = observability_gramian(&abar, &c3, 0, l)?;
    let min = min_eigenvalue(&gram);
    Ok(ObservabilityReport {
        c1,
        c2,
        l,
        min_gramian_eig: min,
        max_gramian_eig: max_eigenvalue(&gram),
        observable: min >= a_tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub index: usize,
    pub label: String,
    pub cardinality: usize,
    pub observable: bool,
    pub min_gramian_eig: f64,
    /// Kept mode whose attack set strictly contains this one.
    pub dominated_by: Option<usize>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionAudit {
    pub entries: Vec<AuditEntry>,
    /// Indices into the input slice, in input order.
    pub kept: Vec<usize>,
}

impl ReductionAudit {
    pub fn reason(&self, index: usize) -> &'static str {
        let e = &self.entries[index];
        match (e.kept, e.observable, e.dominated_by) {
            (true, _, _) => "kept",
            (false, false, _) => "unobservable",
            (false, true, Some(_)) => "dominated",
            (false, true, None) => "unknown",
        }
    }
}

/// Mode reduction over `[c1, c2]`, done separately for every structure.
///
/// Modes are visited by decreasing number of attack locations; a mode is
/// kept when it is observable and no kept mode of the same structure assumes
/// a strict superset of its locations.
pub fn reduce_modes(modes: &[LinearModeData], c1: usize, c2: usize, l: usize, a_tol: f64) -> Result<ReductionAudit> {
    let reports = modes
        .iter()
        .map(|m| check_uniform_observability(m, c1, c2, l, a_tol))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| modes[b].label.attacks.len().cmp(&modes[a].label.attacks.len()).then(a.cmp(&b)));

    let mut kept_by_structure: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut entries: Vec<Option<AuditEntry>> = vec![None; modes.len()];
    for &j in &order {
        let label = &modes[j].label;
        let kept_here = kept_by_structure.entry(label.structure).or_default();
        let dominated_by = kept_here
            .iter()
            .copied()
            .find(|&k| label.attacks.is_strict_subset(&modes[k].label.attacks));
        let observable = reports[j].observable;
        let kept = observable && dominated_by.is_none();
        if kept {
            kept_here.push(j);
        }
        entries[j] = Some(AuditEntry {
            index: j,
            label: label.to_string(),
            cardinality: label.attacks.len(),
            observable,
            min_gramian_eig: reports[j].min_gramian_eig,
            dominated_by,
            kept,
        });
    }
    let entries: Vec<AuditEntry> = entries.into_iter().map(|e| e.unwrap()).collect();
    let kept = entries.iter().filter(|e| e.kept).map(|e| e.index).collect();
    Ok(ReductionAudit { entries, kept })
}

/// Attack estimate after the per-location tests.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueModeEstimate {
    pub label: ModeLabel,
    pub attack_now: Vector,
    pub attack_prev: Vector,
}

fn element_significant(d: f64, var: f64, z: f64) -> bool {
    if var > 0.0 {
        d.abs() / var.sqrt() > z
    } else {
        d != 0.0
    }
}

/// Per-location z-tests on the selected mode's attack estimate.
///
/// `attack_now` / `p_now` hold `V1 d1_k` and its covariance in location
/// coordinates, `attack_prev` / `p_prev` hold `V2 d2_{k-1}`. A location of
/// `label` is kept when either of its elements is significant; all other
/// elements are zeroed. A location with zero variance and a nonzero estimate
/// counts as significant.
pub fn true_mode_estimation(
    label: &ModeLabel,
    attack_now: &Vector,
    p_now: &Matrix,
    attack_prev: &Vector,
    p_prev: &Matrix,
    alpha1: f64,
    alpha2: f64,
) -> Result<TrueModeEstimate> {
    let q = attack_now.len();
    if attack_prev.len() != q || p_now.shape() != (q, q) || p_prev.shape() != (q, q) {
        return Err(Error::dim("true_mode_estimation", q, attack_prev.len()));
    }
    let z1 = z_quantile(alpha1)?;
    let z2 = z_quantile(alpha2)?;
    let mut now = Vector::zeros(q);
    let mut prev = Vector::zeros(q);
    let mut locations = Vec::new();
    for i in label.attacks.indices() {
        if i >= q {
            return Err(Error::Domain(format!("attack location {i} outside estimate of length {q}")));
        }
        let s1 = element_significant(attack_now[i], p_now[(i, i)], z1);
        let s2 = element_significant(attack_prev[i], p_prev[(i, i)], z2);
        if s1 {
            now[i] = attack_now[i];
        }
        if s2 {
            prev[i] = attack_prev[i];
        }
        if s1 || s2 {
            locations.push(i);
        }
    }
    Ok(TrueModeEstimate {
        label: ModeLabel::new(label.structure, crate::model::AttackLocationSet::from_indices(locations)),
        attack_now: now,
        attack_prev: prev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedRunConfig {
    pub bank: BankConfig,
    /// Re-reduction period in steps; `None` reduces once.
    pub window: Option<usize>,
    pub horizon: usize,
    pub a_tol: f64,
}

#[derive(Debug, Clone)]
pub struct ReducedRun {
    pub estimates: Vec<JointEstimate>,
    /// Audit of each reduction, with the step it was made at.
    pub audits: Vec<(usize, ReductionAudit)>,
    /// Number of filters run at each step.
    pub bank_sizes: Vec<usize>,
}

/// Runs the bank on the reduced mode set with per-location tests.
///
/// `candidates[j]` and `linear[j]` describe the same mode. `ys[k]`, `us[k]`
/// are the output and input at step `k`, with `k = 0` the initial sample.
#[allow(clippy::too_many_arguments)]
pub fn nisme_reduced_run(
    candidates: &[ModeModel],
    linear: &[LinearModeData],
    ys: &[Vector],
    us: &[Vector],
    x0: &Vector,
    p0: &Matrix,
    t0: f64,
    cfg: &ReducedRunConfig,
) -> Result<ReducedRun> {
    if candidates.len() != linear.len() {
        return Err(Error::dim("nisme_reduced_run modes", candidates.len(), linear.len()));
    }
    if ys.is_empty() || ys.len() != us.len() {
        return Err(Error::dim("nisme_reduced_run samples", ys.len(), us.len()));
    }
    let mut bank_cfg = cfg.bank;
    bank_cfg.rule = SignificanceRule::Elementwise;
    let period = cfg.window.unwrap_or(usize::MAX).max(cfg.horizon + 1);

    let reduce = |q: usize| -> Result<(ReductionAudit, Vec<ModeModel>)> {
        let c1 = q.saturating_mul(period);
        let c2 = c1.saturating_add(period.min(usize::MAX / 2)).max(c1 + cfg.horizon + 1);
        let audit = reduce_modes(linear, c1, c2, cfg.horizon, cfg.a_tol)?;
        if audit.kept.is_empty() {
            return Err(Error::config("modes", "no observable mode survives the reduction"));
        }
        let set = audit.kept.iter().map(|&j| candidates[j].clone()).collect();
        Ok((audit, set))
    };

    let (audit, mut active) = reduce(0)?;
    let mut audits = vec![(0, audit)];
    let mut bank = init_bank(&active, x0, p0, &ys[0], &us[0], t0, &bank_cfg)?;
    let mut estimates = Vec::with_capacity(ys.len() - 1);
    let mut bank_sizes = Vec::with_capacity(ys.len() - 1);
    for k in 1..ys.len() {
        if cfg.window.is_some() && k % period == 0 {
            let (audit, next) = reduce(k / period)?;
            if audit.kept != audits.last().unwrap().1.kept {
                bank = rebuild_bank(&bank, &active, &next, &ys[k - 1], &us[k - 1], &bank_cfg)?;
                active = next;
            }
            audits.push((k, audit));
        }
        let (next, est) = nisme_step(&bank, &active, &ys[k], &us[k - 1], &us[k], &bank_cfg)?;
        bank = next;
        bank_sizes.push(active.len());
        estimates.push(est);
    }
    Ok(ReducedRun {
        estimates,
        audits,
        bank_sizes,
    })
}

/// Carries filters and probabilities of retained modes into a new set; new
/// modes start from the selected estimate.
fn rebuild_bank(bank: &BankState, old: &[ModeModel], new: &[ModeModel], y: &Vector, u: &Vector, cfg: &BankConfig) -> Result<BankState> {
    let sel = &bank.filters[bank.selected];
    let fresh = init_bank(new, &sel.x_hat, &sel.p_x, y, u, bank.time, cfg)?;
    let mut filters = fresh.filters;
    let mut post = fresh.posteriors;
    for (j, m) in new.iter().enumerate() {
        if let Some(i) = old.iter().position(|o| o.label == m.label) {
            filters[j] = bank.filters[i].clone();
            post[j] = bank.posteriors[i];
        }
    }
    let total: f64 = post.iter().sum();
    post.iter_mut().for_each(|p| *p /= total);
    Ok(BankState {
        filters,
        posteriors: post,
        selected: 0,
        reported: new[0].label.clone(),
        step: bank.step,
        time: bank.time,
    })
}
