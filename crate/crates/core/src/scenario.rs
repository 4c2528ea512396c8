//! Scenario files, experiment orchestration, metrics and run artifacts.
//!
//! A run simulates the plant, runs the estimator bank (full or reduced mode
//! set) and writes, into its output directory:
//!
//! - `trace.csv`: ground truth, see [`crate::plant::trace_header`]
//! - `estimates.csv`: reported mode and estimates per step
//! - `posteriors.csv`: mode probabilities per step (`p_j` is mode `j` of
//!   `manifest.toml`)
//! - `metrics.toml`, `manifest.toml`, `scenario.toml` (effective spec)
//! - `reduction_audit.csv` for reduced runs
//! - `timing.toml`: wall-clock figures, the only non-reproducible file

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{init_bank, nisme_step, product_labels, BankConfig, JointEstimate, SignificanceRule};
use crate::error::{Error, Result};
use crate::model::{AttackLocationSet, ModeLabel, ModeModel};
use crate::nise::NiseConfig;
use crate::numerics::{Matrix, Vector, DEFAULT_RANK_TOL};
use crate::ode::Integrator;
use crate::plant::{
    build_case_study_schedule, fmt_float, mode_models_for_network, sample_initial_state, simulate,
    write_trace_csv, AttackSchedule, Bus, CaseTargets, DroopController, Line, PowerNetwork, SimConfig, SimTrace,
};
use crate::reduction::{nisme_reduced_run, reduce_modes, LinearModeData, ReducedRunConfig, ReductionAudit, DEFAULT_A_TOL};

pub const SCHEMA_VERSION: u32 = 1;

/// Consecutive matching steps required before a detection counts.
pub const DETECTION_HOLD: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    /// Simulated time in seconds.
    pub horizon: f64,
    /// Sampling period in seconds.
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub network: NetworkSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub controller: ControllerSpec,
    pub attacks: AttackSpec,
    pub modes: ModeSetSpec,
    #[serde(default)]
    pub filter: FilterSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `nine_bus`, `synthetic_68` or `custom`.
    pub preset: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buses: Vec<Bus>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lines: Vec<Line>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub switchable: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// `Q = process I`.
    pub process: f64,
    /// `R = measurement I`.
    pub measurement: f64,
    /// Initial covariance `P0 = initial I`.
    pub initial: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            process: 1e-4,
            measurement: 1e-8,
            initial: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub kappa: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        ControllerSpec { kappa: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// `case_study`, `custom` or `none`.
    pub script: String,
    /// Targets of the case-study script; network default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_buses: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actuator_inputs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<AttackSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEntry {
    pub structure: usize,
    pub attacks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSetSpec {
    /// `case_study`, `explicit`, `power_set` or `reduced`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub list: Vec<ModeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub delta: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub integrator: Integrator,
    pub substeps: usize,
    pub rank_tol: f64,
    pub a_tol: f64,
    /// Gramian horizon `l`; state dimension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_l: Option<usize>,
    /// Re-reduction period in steps; reduce once when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            delta: 0.033,
            alpha1: 0.75,
            alpha2: 0.75,
            integrator: Integrator::Rk4,
            substeps: 1,
            rank_tol: DEFAULT_RANK_TOL,
            a_tol: DEFAULT_A_TOL,
            horizon_l: None,
            window: None,
        }
    }
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::config("scenario", e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn network(&self) -> Result<PowerNetwork> {
        let net = match self.network.preset.as_str() {
            "nine_bus" => PowerNetwork::nine_bus(),
            "synthetic_68" => PowerNetwork::synthetic_68(),
            "custom" => PowerNetwork {
                buses: self.network.buses.clone(),
                lines: self.network.lines.clone(),
                switchable: self.network.switchable.clone(),
            },
            other => return Err(Error::config("network.preset", format!("unknown preset '{other}'"))),
        };
        if self.network.preset != "custom" && !(self.network.buses.is_empty() && self.network.lines.is_empty()) {
            return Err(Error::config("network", "buses/lines are only allowed with preset = \"custom\""));
        }
        net.validate()?;
        Ok(net)
    }

    pub fn targets(&self) -> CaseTargets {
        let default = match self.network.preset.as_str() {
            "synthetic_68" => CaseTargets::synthetic_68(),
            "nine_bus" => CaseTargets::nine_bus(),
            _ => CaseTargets {
                sensor_buses: Vec::new(),
                actuator_inputs: Vec::new(),
            },
        };
        CaseTargets {
            sensor_buses: self.attacks.sensor_buses.clone().unwrap_or(default.sensor_buses),
            actuator_inputs: self.attacks.actuator_inputs.clone().unwrap_or(default.actuator_inputs),
        }
    }

    pub fn schedule(&self, net: &PowerNetwork) -> Result<AttackSchedule> {
        let sch = match self.attacks.script.as_str() {
            "case_study" => build_case_study_schedule(net, &self.targets())?,
            "custom" => self
                .attacks
                .schedule
                .clone()
                .ok_or_else(|| Error::config("attacks.schedule", "required when script = \"custom\""))?,
            "none" => AttackSchedule::default(),
            other => return Err(Error::config("attacks.script", format!("unknown script '{other}'"))),
        };
        sch.validate(net, self.horizon)?;
        Ok(sch)
    }

    /// Candidate labels of the configured mode set (before any reduction).
    pub fn mode_labels(&self, net: &PowerNetwork) -> Result<Vec<ModeLabel>> {
        let targets = self.targets();
        let labels = match self.modes.kind.as_str() {
            "case_study" => {
                let all_open = net.structure_count() - 1;
                vec![
                    ModeLabel::new(0, AttackLocationSet::empty()),
                    ModeLabel::new(0, targets.sensor_set(net)),
                    ModeLabel::new(0, targets.actuator_set()),
                    ModeLabel::new(all_open, AttackLocationSet::empty()),
                ]
            }
            "explicit" => {
                if self.modes.list.is_empty() {
                    return Err(Error::config("modes.list", "explicit mode set is empty"));
                }
                self.modes
                    .list
                    .iter()
                    .map(|e| ModeLabel::new(e.structure, AttackLocationSet::from_indices(e.attacks.iter().copied())))
                    .collect()
            }
            "power_set" | "reduced" => product_labels(net.structure_count(), &targets.locations(net)),
            other => return Err(Error::config("modes.kind", format!("unknown mode set '{other}'"))),
        };
        let total = net.input_dim() + net.output_dim();
        for (j, l) in labels.iter().enumerate() {
            if l.structure >= net.structure_count() {
                return Err(Error::config(format!("modes.list[{j}].structure"), format!("{} structures available", net.structure_count())));
            }
            if let Some(i) = l.attacks.indices().find(|&i| i >= total) {
                return Err(Error::config(format!("modes.list[{j}].attacks"), format!("location {i} outside 0..{total}")));
            }
        }
        for (j, l) in labels.iter().enumerate() {
            if labels[..j].contains(l) {
                return Err(Error::config(format!("modes.list[{j}]"), format!("duplicate mode {l}")));
            }
        }
        Ok(labels)
    }

    pub fn is_reduced(&self) -> bool {
        self.modes.kind == "reduced"
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("horizon", "must be positive"));
        }
        if ((self.horizon / self.dt).round() * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::config("horizon", "must be a whole number of sampling periods"));
        }
        for (path, v) in [
            ("noise.process", self.noise.process),
            ("noise.initial", self.noise.initial),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(path, "must be non-negative"));
            }
        }
        if !(self.noise.measurement > 0.0 && self.noise.measurement.is_finite()) {
            return Err(Error::config("noise.measurement", "must be positive"));
        }
        if !(self.controller.kappa >= 0.0 && self.controller.kappa.is_finite()) {
            return Err(Error::config("controller.kappa", "must be non-negative"));
        }
        let f = &self.filter;
        for (path, a) in [("filter.alpha1", f.alpha1), ("filter.alpha2", f.alpha2)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::config(path, "must lie in (0, 1)"));
            }
        }
        if f.substeps == 0 {
            return Err(Error::config("filter.substeps", "must be at least 1"));
        }
        if !(f.rank_tol > 0.0 && f.a_tol >= 0.0) {
            return Err(Error::config("filter", "rank_tol must be positive and a_tol non-negative"));
        }
        if f.window == Some(0) {
            return Err(Error::config("filter.window", "must be positive"));
        }
        let net = self.network()?;
        self.schedule(&net)?;
        let labels = self.mode_labels(&net)?;
        let bank_size = if self.is_reduced() { net.structure_count() } else { labels.len() };
        if !(f.delta > 0.0 && f.delta * (bank_size as f64) < 1.0) {
            return Err(Error::config(
                "filter.delta",
                format!("must lie in (0, 1/{bank_size}) for a bank of {bank_size} modes"),
            ));
        }
        if let Some(l) = f.horizon_l {
            if l == 0 {
                return Err(Error::config("filter.horizon_l", "must be positive"));
            }
            if let Some(w) = f.window {
                if l >= w {
                    return Err(Error::config("filter.window", "must exceed horizon_l"));
                }
            }
        }
        Ok(())
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            delta: self.filter.delta,
            alpha1: self.filter.alpha1,
            alpha2: self.filter.alpha2,
            rule: if self.is_reduced() {
                SignificanceRule::Elementwise
            } else {
                SignificanceRule::ChiSquare
            },
            nise: NiseConfig {
                dt: self.dt,
                substeps: self.filter.substeps,
                integrator: self.filter.integrator,
                rank_tol: self.filter.rank_tol,
            },
        }
    }
}

/// Everything the run needs, built from a validated spec.
pub struct Setup {
    pub network: Arc<PowerNetwork>,
    pub schedule: AttackSchedule,
    pub controller: DroopController,
    pub labels: Vec<ModeLabel>,
    pub models: Vec<ModeModel>,
    pub q: Matrix,
    pub r: Matrix,
    pub p0: Matrix,
    /// Equilibrium of the nominal configuration.
    pub x_eq: Vector,
}

pub fn setup(spec: &ScenarioSpec) -> Result<Setup> {
    spec.validate()?;
    let net = Arc::new(spec.network()?);
    let schedule = spec.schedule(&net)?;
    let controller = DroopController::balanced(&net, spec.controller.kappa);
    let labels = spec.mode_labels(&net)?;
    let (n, m) = (net.state_dim(), net.output_dim());
    let q = Matrix::identity(n, n) * spec.noise.process;
    let r = Matrix::identity(m, m) * spec.noise.measurement;
    let p0 = Matrix::identity(n, n) * spec.noise.initial;
    let models = mode_models_for_network(&net, &labels, &q, &r)?;
    let x_eq = net.equilibrium(&controller.p_ref, 0)?;
    Ok(Setup {
        network: net,
        schedule,
        controller,
        labels,
        models,
        q,
        r,
        p0,
        x_eq,
    })
}

/// Mode reduction of a reduced-set scenario, linearised at the nominal
/// equilibrium.
pub fn reduce_scenario(spec: &ScenarioSpec, s: &Setup) -> Result<(Vec<LinearModeData>, ReductionAudit)> {
    let linear = s
        .models
        .iter()
        .map(|m| LinearModeData::linearized_at(m, &s.x_eq, &s.controller.p_ref, 0.0, spec.dt))
        .collect::<Result<Vec<_>>>()?;
    let l = spec.filter.horizon_l.unwrap_or(s.network.state_dim());
    let window = spec.filter.window.unwrap_or(l + 1);
    let audit = reduce_modes(&linear, 0, window.max(l + 1), l, spec.filter.a_tol)?;
    Ok((linear, audit))
}

/// Per-step estimator output kept for scoring and export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateRecord {
    pub selected: Vec<usize>,
    pub modes: Vec<ModeLabel>,
    pub significant: Vec<bool>,
    pub x_hat: Vec<Vector>,
    pub attack_now: Vec<Vector>,
    pub attack_prev: Vec<Vector>,
    pub attack_now_std: Vec<Vector>,
    pub attack_prev_std: Vec<Vector>,
    pub posteriors: Vec<Vec<f64>>,
    pub flags: Vec<String>,
}

impl EstimateRecord {
    fn push(&mut self, e: JointEstimate) {
        let mut flags = Vec::new();
        if e.flags.posterior_underflow {
            flags.push("underflow".to_string());
        }
        if e.flags.attack_free_missing {
            flags.push("no_attack_free_variant".to_string());
        }
        for q in &e.flags.quarantined {
            flags.push(format!("quarantined_{q}"));
        }
        self.selected.push(e.selected);
        self.modes.push(e.mode);
        self.significant.push(e.attack_significant);
        self.x_hat.push(e.x_hat);
        self.attack_now.push(e.attack_now);
        self.attack_prev.push(e.attack_prev);
        self.attack_now_std.push(e.attack_now_std);
        self.attack_prev_std.push(e.attack_prev_std);
        self.posteriors.push(e.posteriors);
        self.flags.push(flags.join(" "));
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Ground truth needed for scoring.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TruthRecord {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub modes: Vec<ModeLabel>,
    pub attacks: Vec<Vector>,
    /// Number of actuator locations `s`.
    pub inputs: usize,
}

impl TruthRecord {
    pub fn from_trace(trace: &SimTrace, inputs: usize) -> Self {
        TruthRecord {
            times: trace.times.clone(),
            states: trace.states.clone(),
            modes: trace.modes.clone(),
            attacks: trace.attacks.clone(),
            inputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub start: f64,
    pub end: f64,
    pub mode: String,
    pub steps: usize,
    pub accuracy: f64,
    /// Seconds from the segment start to a held detection; absent when the
    /// run never settled on the mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub location: usize,
    /// Steps during which the location was attacked.
    pub steps: usize,
    pub rmse: f64,
    /// Root-mean-square of the reported standard deviation over those steps.
    pub reported_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub horizon: f64,
    pub mode_accuracy: f64,
    pub segments: Vec<SegmentMetrics>,
    pub state_rmse: Vec<f64>,
    pub attacks: Vec<AttackMetrics>,
    pub flagged_steps: usize,
}

impl RunMetrics {
    /// Accuracy over the steps with `t >= from`.
    pub fn accuracy_after(&self, from: f64) -> Option<f64> {
        let mut hit = 0.0;
        let mut n = 0usize;
        for s in self.segments.iter().filter(|s| s.start >= from - 1e-9) {
            hit += s.accuracy * s.steps as f64;
            n += s.steps;
        }
        (n > 0).then(|| hit / n as f64)
    }
}

/// Scores step `k = 1..` estimates against truth sampled at `k = 0..`.
///
/// Actuator estimates (`d2`, one step behind) are scored against the truth at
/// `t_{k-1}`, sensor estimates against the truth at `t_k`.
pub fn compute_metrics(truth: &TruthRecord, est: &EstimateRecord) -> Result<RunMetrics> {
    let k_max = est.len();
    if truth.times.len() != k_max + 1 {
        return Err(Error::dim("compute_metrics steps", truth.times.len(), k_max + 1));
    }
    let hits: Vec<bool> = (0..k_max).map(|i| est.modes[i] == truth.modes[i + 1]).collect();
    let mode_accuracy = if k_max == 0 {
        0.0
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / k_max as f64
    };

    let mut segments = Vec::new();
    let mut i = 0;
    while i < k_max {
        let mode = &truth.modes[i + 1];
        let mut j = i;
        while j < k_max && &truth.modes[j + 1] == mode {
            j += 1;
        }
        let count = hits[i..j].iter().filter(|&&h| h).count();
        let latency = (i..j)
            .find(|&a| a + DETECTION_HOLD <= j && hits[a..a + DETECTION_HOLD].iter().all(|&h| h))
            .map(|a| truth.times[a + 1] - truth.times[i + 1]);
        segments.push(SegmentMetrics {
            start: truth.times[i + 1],
            end: truth.times[j],
            mode: mode.to_string(),
            steps: j - i,
            accuracy: count as f64 / (j - i) as f64,
            detection_latency: latency,
        });
        i = j;
    }

    let n = truth.states.first().map_or(0, |x| x.len());
    let mut sq = vec![0.0; n];
    for i in 0..k_max {
        let e = &est.x_hat[i] - &truth.states[i + 1];
        for (acc, v) in sq.iter_mut().zip(e.iter()) {
            *acc += v * v;
        }
    }
    let state_rmse = sq.iter().map(|v| (v / k_max.max(1) as f64).sqrt()).collect();

    let s = truth.inputs;
    let mut per_loc: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for i in 0..k_max {
        for l in truth.modes[i + 1].attacks.indices().filter(|&l| l >= s) {
            let entry = per_loc.entry(l).or_default();
            let err = est.attack_now[i][l] - truth.attacks[i + 1][l];
            entry.0 += 1;
            entry.1 += err * err;
            entry.2 += est.attack_now_std[i][l].powi(2);
        }
        for l in truth.modes[i].attacks.indices().filter(|&l| l < s) {
            let entry = per_loc.entry(l).or_default();
            let err = est.attack_prev[i][l] - truth.attacks[i][l];
            entry.0 += 1;
            entry.1 += err * err;
            entry.2 += est.attack_prev_std[i][l].powi(2);
        }
    }
    let attacks = per_loc
        .into_iter()
        .map(|(location, (steps, se, var))| AttackMetrics {
            location,
            steps,
            rmse: (se / steps as f64).sqrt(),
            reported_std: (var / steps as f64).sqrt(),
        })
        .collect();

    Ok(RunMetrics {
        steps: k_max,
        horizon: truth.times.last().copied().unwrap_or(0.0),
        mode_accuracy,
        segments,
        state_rmse,
        attacks,
        flagged_steps: est.flags.iter().filter(|f| !f.is_empty()).count(),
    })
}

/// In-memory result of a run.
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: SimTrace,
    pub truth: TruthRecord,
    pub estimates: EstimateRecord,
    pub labels: Vec<ModeLabel>,
    pub audit: Option<ReductionAudit>,
    pub bank_size: usize,
    pub wall_seconds: f64,
}

/// Simulates, estimates and scores a scenario without touching the disk.
pub fn execute(spec: &ScenarioSpec) -> Result<RunOutput> {
    let s = setup(spec)?;
    let x0 = sample_initial_state(&s.x_eq, &s.p0, spec.seed)?;
    let cfg = SimConfig {
        dt: spec.dt,
        horizon: spec.horizon,
        seed: spec.seed,
        noisy: true,
    };
    let trace = simulate(&s.network, &s.schedule, &s.controller, &s.q, &s.r, &x0, &cfg)?;
    let truth = TruthRecord::from_trace(&trace, s.network.input_dim());
    let bank_cfg = spec.bank_config();
    let start = Instant::now();
    let mut estimates = EstimateRecord::default();
    let (labels, audit) = if spec.is_reduced() {
        let (linear, _) = reduce_scenario(spec, &s)?;
        let l = spec.filter.horizon_l.unwrap_or(s.network.state_dim());
        let rc = ReducedRunConfig {
            bank: bank_cfg,
            window: spec.filter.window,
            horizon: l,
            a_tol: spec.filter.a_tol,
        };
        let run = nisme_reduced_run(&s.models, &linear, &trace.outputs, &trace.inputs, &s.x_eq, &s.p0, 0.0, &rc)?;
        let audit = run.audits[0].1.clone();
        let kept = audit.kept.iter().map(|&j| s.labels[j].clone()).collect();
        run.estimates.into_iter().for_each(|e| estimates.push(e));
        (kept, Some(audit))
    } else {
        let mut bank = init_bank(&s.models, &s.x_eq, &s.p0, &trace.outputs[0], &trace.inputs[0], 0.0, &bank_cfg)?;
        for k in 1..trace.len() {
            let (next, est) = nisme_step(&bank, &s.models, &trace.outputs[k], &trace.inputs[k - 1], &trace.inputs[k], &bank_cfg)
                .map_err(|e| match e {
                    Error::Divergence { what, .. } => Error::Divergence {
                        time: trace.times[k],
                        what: format!("step {k}: {what}"),
                    },
                    other => other,
                })?;
            bank = next;
            estimates.push(est);
        }
        (s.labels.clone(), None)
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    let metrics = compute_metrics(&truth, &estimates)?;
    Ok(RunOutput {
        metrics,
        bank_size: labels.len(),
        trace,
        truth,
        estimates,
        labels,
        audit,
        wall_seconds,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn estimates_header(n: usize, q: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "time", "selected", "structure", "attacks", "significant"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n).map(|i| format!("x_hat_{i}")));
    for prefix in ["d_now", "d_prev", "d_now_std", "d_prev_std"] {
        h.extend((0..q).map(|l| format!("{prefix}_{l}")));
    }
    h.push("flags".into());
    h
}

pub fn write_estimates_csv(path: &Path, truth: &TruthRecord, est: &EstimateRecord) -> Result<()> {
    let n = truth.states.first().map_or(0, |x| x.len());
    let q = est.attack_now.first().map_or(0, |x| x.len());
    let mut w = csv_writer(path)?;
    w.write_record(estimates_header(n, q)).map_err(csv_io)?;
    for i in 0..est.len() {
        let mut row = vec![
            (i + 1).to_string(),
            fmt_float(truth.times[i + 1]),
            est.selected[i].to_string(),
            est.modes[i].structure.to_string(),
            est.modes[i].attacks.to_string(),
            (est.significant[i] as u8).to_string(),
        ];
        for v in [&est.x_hat[i], &est.attack_now[i], &est.attack_prev[i], &est.attack_now_std[i], &est.attack_prev_std[i]] {
            row.extend(v.iter().map(|&x| fmt_float(x)));
        }
        row.push(est.flags[i].clone());
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_posteriors_csv(path: &Path, truth: &TruthRecord, est: &EstimateRecord) -> Result<()> {
    let modes = est.posteriors.first().map_or(0, |p| p.len());
    let mut w = csv_writer(path)?;
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((0..modes).map(|j| format!("p_{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for (i, p) in est.posteriors.iter().enumerate() {
        let mut row = vec![(i + 1).to_string(), fmt_float(truth.times[i + 1])];
        row.extend(p.iter().map(|&v| fmt_float(v)));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_audit_csv(path: &Path, audit: &ReductionAudit) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["index", "mode", "cardinality", "observable", "min_gramian_eig", "dominated_by", "kept", "reason"])
        .map_err(csv_io)?;
    for e in &audit.entries {
        w.write_record([
            e.index.to_string(),
            e.label.clone(),
            e.cardinality.to_string(),
            (e.observable as u8).to_string(),
            fmt_float(e.min_gramian_eig),
            e.dominated_by.map_or(String::new(), |d| d.to_string()),
            (e.kept as u8).to_string(),
            audit.reason(e.index).to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub spec_sha256: String,
    pub nisme_version: String,
    pub schema_version: u32,
    pub bank_size: usize,
    pub modes: Vec<String>,
    pub files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub const DATA_FILES: [&str; 4] = ["trace.csv", "estimates.csv", "posteriors.csv", "metrics.toml"];

/// Runs a scenario and writes its artifacts into `out`.
pub fn run_scenario(spec: &ScenarioSpec, out: &Path) -> Result<RunMetrics> {
    let run = execute(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let spec_text = spec.to_toml();
    write_text(&out.join("scenario.toml"), &spec_text)?;
    let net = spec.network()?;
    let tf = fs::File::create(out.join("trace.csv"))?;
    write_trace_csv(&run.trace, &net, std::io::BufWriter::new(tf))?;
    write_estimates_csv(&out.join("estimates.csv"), &run.truth, &run.estimates)?;
    write_posteriors_csv(&out.join("posteriors.csv"), &run.truth, &run.estimates)?;
    let metrics_text = toml::to_string(&run.metrics).map_err(|e| Error::Io(e.to_string()))?;
    write_text(&out.join("metrics.toml"), &metrics_text)?;
    let mut names: Vec<&str> = DATA_FILES.to_vec();
    if let Some(audit) = &run.audit {
        write_audit_csv(&out.join("reduction_audit.csv"), audit)?;
        names.push("reduction_audit.csv");
    }
    let mut files = BTreeMap::new();
    for name in names {
        let bytes = fs::read(out.join(name))?;
        files.insert(name.to_string(), sha256_hex(&bytes));
    }
    let manifest = Manifest {
        name: spec.name.clone(),
        seed: spec.seed,
        spec_sha256: sha256_hex(spec_text.as_bytes()),
        nisme_version: env!("CARGO_PKG_VERSION").to_string(),
        schema_version: SCHEMA_VERSION,
        bank_size: run.bank_size,
        modes: run.labels.iter().map(|l| l.to_string()).collect(),
        files,
    };
    write_text(&out.join("manifest.toml"), &toml::to_string(&manifest).map_err(|e| Error::Io(e.to_string()))?)?;
    let timing = format!(
        "wall_seconds = {}\nwall_seconds_per_step = {}\n",
        run.wall_seconds,
        run.wall_seconds / run.metrics.steps.max(1) as f64
    );
    write_text(&out.join("timing.toml"), &timing)?;
    Ok(run.metrics)
}

/// Parses `{i j k}` as written by the `Display` of an attack set.
pub fn parse_attack_set(text: &str) -> Result<AttackLocationSet> {
    let inner = text
        .trim()
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| Error::config("attacks", format!("malformed attack set '{text}'")))?;
    let idx = inner
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::config("attacks", format!("bad index '{t}'"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackLocationSet::from_indices(idx))
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(csv_io)?.iter().map(|s| s.to_string()).collect();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>().map_err(csv_io)?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Io(format!("missing column '{name}'")))
}

fn field_f64(row: &csv::StringRecord, i: usize) -> Result<f64> {
    row.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Io(format!("bad number in column {i}")))
}

fn vector_of(row: &csv::StringRecord, header: &[String], prefix: &str) -> Result<Vector> {
    let cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.strip_prefix(prefix).is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit())))
        .map(|(i, _)| i)
        .collect();
    let vals = cols.iter().map(|&i| field_f64(row, i)).collect::<Result<Vec<_>>>()?;
    Ok(Vector::from_vec(vals))
}

/// Truth and estimates read back from a run directory.
pub fn records_from_files(dir: &Path) -> Result<(TruthRecord, EstimateRecord)> {
    let (th, trows) = read_csv(&dir.join("trace.csv"))?;
    let inputs = th.iter().filter(|h| h.starts_with("u_")).count();
    let (ts, ta) = (column(&th, "true_structure")?, column(&th, "true_attacks")?);
    let mut truth = TruthRecord {
        inputs,
        ..Default::default()
    };
    for row in &trows {
        truth.times.push(field_f64(row, 0)?);
        let mut x = vector_of(row, &th, "theta_")?.as_slice().to_vec();
        x.extend(vector_of(row, &th, "f_")?.iter());
        truth.states.push(Vector::from_vec(x));
        let structure = row.get(ts).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Io("bad true_structure".into()))?;
        truth.modes.push(ModeLabel::new(structure, parse_attack_set(row.get(ta).unwrap_or(""))?));
        truth.attacks.push(vector_of(row, &th, "d_")?);
    }

    let (eh, erows) = read_csv(&dir.join("estimates.csv"))?;
    let (ps, pa, psel, psig, pflag) = (
        column(&eh, "structure")?,
        column(&eh, "attacks")?,
        column(&eh, "selected")?,
        column(&eh, "significant")?,
        column(&eh, "flags")?,
    );
    let (_, prows) = read_csv(&dir.join("posteriors.csv"))?;
    let mut est = EstimateRecord::default();
    for (i, row) in erows.iter().enumerate() {
        let parse_usize = |c: usize| row.get(c).and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| Error::Io(format!("bad integer in column {c}")));
        est.selected.push(parse_usize(psel)?);
        est.modes.push(ModeLabel::new(parse_usize(ps)?, parse_attack_set(row.get(pa).unwrap_or(""))?));
        est.significant.push(parse_usize(psig)? == 1);
        est.x_hat.push(vector_of(row, &eh, "x_hat_")?);
        est.attack_now.push(vector_of(row, &eh, "d_now_")?);
        est.attack_prev.push(vector_of(row, &eh, "d_prev_")?);
        est.attack_now_std.push(vector_of(row, &eh, "d_now_std_")?);
        est.attack_prev_std.push(vector_of(row, &eh, "d_prev_std_")?);
        est.flags.push(row.get(pflag).unwrap_or("").to_string());
        let prow = prows.get(i).ok_or_else(|| Error::Io("posteriors.csv is shorter than estimates.csv".into()))?;
        est.posteriors.push((2..prow.len()).map(|c| field_f64(prow, c)).collect::<Result<Vec<_>>>()?);
    }
    Ok((truth, est))
}

/// Recomputes the metrics of a run from its CSV files.
pub fn metrics_from_files(dir: &Path) -> Result<RunMetrics> {
    let (truth, est) = records_from_files(dir)?;
    compute_metrics(&truth, &est)
}

pub fn load_metrics(dir: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(dir.join("metrics.toml")).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    toml::from_str(&text).map_err(|e| Error::Io(format!("metrics.toml: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub steps: usize,
    pub mode_accuracy_delta: f64,
    pub state_rmse_delta: Vec<f64>,
    /// `(location, rmse_b - rmse_a)` for locations scored in both runs.
    pub attack_rmse_delta: Vec<(usize, f64)>,
    /// Fraction of steps whose reported modes differ.
    pub mode_divergence: f64,
    pub divergence_threshold: f64,
    pub diverged: bool,
}

/// Deltas `b - a` plus the per-step mode-report divergence.
pub fn compare_runs(
    a: &RunMetrics,
    b: &RunMetrics,
    modes_a: &[ModeLabel],
    modes_b: &[ModeLabel],
    threshold: f64,
) -> Result<Comparison> {
    if a.steps != b.steps || (a.horizon - b.horizon).abs() > 1e-9 || modes_a.len() != modes_b.len() || modes_a.len() != a.steps {
        return Err(Error::Domain(format!(
            "runs cover different horizons ({} steps / {} s vs {} steps / {} s)",
            a.steps, a.horizon, b.steps, b.horizon
        )));
    }
    if a.state_rmse.len() != b.state_rmse.len() {
        return Err(Error::dim("compare_runs states", a.state_rmse.len(), b.state_rmse.len()));
    }
    let differ = modes_a.iter().zip(modes_b).filter(|(x, y)| x != y).count();
    let mode_divergence = if a.steps == 0 { 0.0 } else { differ as f64 / a.steps as f64 };
    let attack_rmse_delta = a
        .attacks
        .iter()
        .filter_map(|x| b.attacks.iter().find(|y| y.location == x.location).map(|y| (x.location, y.rmse - x.rmse)))
        .collect();
    Ok(Comparison {
        steps: a.steps,
        mode_accuracy_delta: b.mode_accuracy - a.mode_accuracy,
        state_rmse_delta: a.state_rmse.iter().zip(&b.state_rmse).map(|(x, y)| y - x).collect(),
        attack_rmse_delta,
        mode_divergence,
        divergence_threshold: threshold,
        diverged: mode_divergence > threshold,
    })
}

/// Compares two run directories.
pub fn compare_dirs(a: &Path, b: &Path, threshold: f64) -> Result<Comparison> {
    let (_, ea) = records_from_files(a)?;
    let (_, eb) = records_from_files(b)?;
    compare_runs(&load_metrics(a)?, &load_metrics(b)?, &ea.modes, &eb.modes, threshold)
}
