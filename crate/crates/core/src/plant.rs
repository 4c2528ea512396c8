//! Swing-equation power network: ground-truth simulation, attack scripts and
//! the per-mode models handed to the estimators.
//!
//! State layout is `[theta_0 .. theta_{N-1}, f_0 .. f_{N-1}]`; the output of
//! bus `i` occupies rows `3i .. 3i+3` as `[P_elec, theta, f]`. Inputs are the
//! mechanical powers of the generator buses in bus order. Attack locations
//! put actuators first (`0 .. s`) and sensors after (`s + output row`).

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttackLocationSet, ModeLabel, ModeModel, SystemModel};
use crate::numerics::{Matrix, Vector};

/// Integrator substeps per sampling period.
pub const SUBSTEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub kind: BusKind,
    /// Angular momentum `m_i`.
    pub inertia: f64,
    pub damping: f64,
    /// Power demand `P_L`.
    pub load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerNetwork {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    /// Lines an attacker can open, by index into `lines`. Bit `b` of a mode's
    /// structure index means `switchable[b]` is open.
    pub switchable: Vec<usize>,
}

/// Which quantity of a bus an output row carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    ElectricalPower = 0,
    Angle = 1,
    Frequency = 2,
}

impl PowerNetwork {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Generator bus indices; position = input index.
    pub fn generators(&self) -> Vec<usize> {
        (0..self.buses.len()).filter(|&i| self.buses[i].kind == BusKind::Generator).collect()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.buses.len()
    }

    pub fn input_dim(&self) -> usize {
        self.generators().len()
    }

    pub fn output_dim(&self) -> usize {
        3 * self.buses.len()
    }

    pub fn output_index(&self, bus: usize, q: Quantity) -> usize {
        3 * bus + q as usize
    }

    /// Attack location of a sensor.
    pub fn sensor_location(&self, bus: usize, q: Quantity) -> usize {
        self.input_dim() + self.output_index(bus, q)
    }

    /// Line status for a structure index.
    pub fn line_status(&self, structure: usize) -> Vec<bool> {
        let mut on = vec![true; self.lines.len()];
        for (b, &l) in self.switchable.iter().enumerate() {
            if structure & (1 << b) != 0 {
                on[l] = false;
            }
        }
        on
    }

    /// Number of switching hypotheses, `2^(switchable lines)`.
    pub fn structure_count(&self) -> usize {
        1 << self.switchable.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.buses.len();
        if n == 0 {
            return Err(Error::config("network.buses", "network has no buses"));
        }
        for (i, b) in self.buses.iter().enumerate() {
            if !(b.inertia > 0.0 && b.inertia.is_finite()) {
                return Err(Error::config(format!("network.buses[{i}].inertia"), "inertia must be positive"));
            }
            if !(b.damping >= 0.0 && b.damping.is_finite() && b.load.is_finite()) {
                return Err(Error::config(format!("network.buses[{i}]"), "damping and load must be finite, damping >= 0"));
            }
        }
        if self.generators().is_empty() {
            return Err(Error::config("network.buses", "network needs at least one generator"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (k, l) in self.lines.iter().enumerate() {
            if l.from >= n || l.to >= n || l.from == l.to {
                return Err(Error::config(format!("network.lines[{k}]"), "line must join two distinct existing buses"));
            }
            if !seen.insert((l.from.min(l.to), l.from.max(l.to))) {
                return Err(Error::config(format!("network.lines[{k}]"), "duplicate line"));
            }
            if !(l.susceptance > 0.0 && l.susceptance.is_finite()) {
                return Err(Error::config(format!("network.lines[{k}].susceptance"), "susceptance must be positive"));
            }
        }
        for (b, &l) in self.switchable.iter().enumerate() {
            if l >= self.lines.len() {
                return Err(Error::config(format!("network.switchable[{b}]"), "line index out of range"));
            }
        }
        if self.switchable.len() > 16 {
            return Err(Error::config("network.switchable", "at most 16 switchable lines"));
        }
        if !self.connected(&vec![true; self.lines.len()]) {
            return Err(Error::config("network.lines", "network graph is not connected"));
        }
        Ok(())
    }

    fn connected(&self, on: &[bool]) -> bool {
        let n = self.buses.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for (l, line) in self.lines.iter().enumerate() {
                if !on[l] {
                    continue;
                }
                let other = if line.from == i {
                    line.to
                } else if line.to == i {
                    line.from
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Set points that balance generation and demand with zero frequency:
    /// each generator covers its own demand plus an equal share of the
    /// load-bus demand.
    pub fn balanced_set_points(&self) -> Vector {
        let gens = self.generators();
        let load_total: f64 = self.buses.iter().filter(|b| b.kind == BusKind::Load).map(|b| b.load).sum();
        Vector::from_iterator(gens.len(), gens.iter().map(|&g| self.buses[g].load + load_total / gens.len() as f64))
    }

    /// Angles with `theta_0 = 0` and zero frequency at which flows balance the
    /// injections `P_M - P_L`, by Newton iteration.
    pub fn equilibrium(&self, set_points: &Vector, structure: usize) -> Result<Vector> {
        let n = self.buses.len();
        let on = self.line_status(structure);
        let gens = self.generators();
        let mut inj = Vector::from_iterator(n, self.buses.iter().map(|b| -b.load));
        for (g, &bus) in gens.iter().enumerate() {
            inj[bus] += set_points[g];
        }
        let mut theta = Vector::zeros(n);
        if n == 1 {
            return Ok(Vector::zeros(2));
        }
        for _ in 0..100 {
            let (flow, jac) = self.flows_and_jacobian(&theta, &on);
            let resid = (flow - &inj).rows(1, n - 1).into_owned();
            if resid.amax() < 1e-13 {
                let mut x = Vector::zeros(2 * n);
                x.rows_mut(0, n).copy_from(&theta);
                return Ok(x);
            }
            let j = jac.view((1, 1), (n - 1, n - 1)).into_owned();
            let step = j
                .lu()
                .solve(&resid)
                .ok_or_else(|| Error::Numerical("singular power-flow Jacobian".into()))?;
            for i in 1..n {
                theta[i] -= step[i - 1];
            }
        }
        Err(Error::Numerical("power-flow equilibrium did not converge".into()))
    }

    /// Net outgoing flow of every bus and its Jacobian in the angles.
    fn flows_and_jacobian(&self, theta: &Vector, on: &[bool]) -> (Vector, Matrix) {
        let n = self.buses.len();
        let mut flow = Vector::zeros(n);
        let mut jac = Matrix::zeros(n, n);
        for (k, l) in self.lines.iter().enumerate() {
            if !on[k] {
                continue;
            }
            let diff = theta[l.from] - theta[l.to];
            let p = l.susceptance * diff.sin();
            let dp = l.susceptance * diff.cos();
            flow[l.from] += p;
            flow[l.to] -= p;
            jac[(l.from, l.from)] += dp;
            jac[(l.from, l.to)] -= dp;
            jac[(l.to, l.to)] += dp;
            jac[(l.to, l.from)] -= dp;
        }
        (flow, jac)
    }

    /// Nine buses: generators 0-2 feeding a six-bus load ring with two
    /// chords. The generator ties (0,4) and (2,8) are switchable.
    pub fn nine_bus() -> Self {
        let gen = Bus {
            kind: BusKind::Generator,
            inertia: 10.0,
            damping: 1.0,
            load: 0.0,
        };
        let load = |p: f64| Bus {
            kind: BusKind::Load,
            inertia: 100.0,
            damping: 1.0,
            load: p,
        };
        let buses = vec![
            gen.clone(),
            gen.clone(),
            gen,
            load(0.30),
            load(0.35),
            load(0.40),
            load(0.30),
            load(0.35),
            load(0.40),
        ];
        let pairs = [(0, 3), (0, 4), (1, 5), (2, 7), (2, 8), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 3), (3, 6), (5, 8)];
        let lines = pairs
            .iter()
            .map(|&(from, to)| Line {
                from,
                to,
                susceptance: 1.5,
            })
            .collect();
        PowerNetwork {
            buses,
            lines,
            switchable: vec![1, 4],
        }
    }

    /// A synthetic network of the size of the 68-bus benchmark (16
    /// generators, 52 loads). The topology is generated, not the benchmark's.
    pub fn synthetic_68() -> Self {
        let n_gen = 16;
        let n_load = 52;
        let mut buses = Vec::with_capacity(n_gen + n_load);
        for _ in 0..n_gen {
            buses.push(Bus {
                kind: BusKind::Generator,
                inertia: 10.0,
                damping: 1.0,
                load: 0.0,
            });
        }
        for i in 0..n_load {
            buses.push(Bus {
                kind: BusKind::Load,
                inertia: 100.0,
                damping: 1.0,
                load: 0.2 + 0.05 * (i % 4) as f64,
            });
        }
        let mut pairs = Vec::new();
        for g in 0..n_gen {
            pairs.push((g, n_gen + (g * n_load) / n_gen));
        }
        for i in 0..n_load {
            pairs.push((n_gen + i, n_gen + (i + 1) % n_load));
        }
        for i in (0..n_load).step_by(4) {
            pairs.push((n_gen + i, n_gen + (i + n_load / 2 + 1) % n_load));
        }
        let lines: Vec<Line> = pairs
            .into_iter()
            .map(|(from, to)| Line {
                from,
                to,
                susceptance: 1.5,
            })
            .collect();
        // Two ring segments away from the generator ties.
        let pick = |a: usize, b: usize| lines.iter().position(|l| l.from == n_gen + a && l.to == n_gen + b).unwrap();
        let switchable = vec![pick(10, 11), pick(37, 38)];
        PowerNetwork {
            buses,
            lines,
            switchable,
        }
    }
}

/// Swing dynamics of one line configuration.
#[derive(Debug, Clone)]
pub struct SwingDynamics {
    pub network: Arc<PowerNetwork>,
    pub line_on: Vec<bool>,
    input_of_bus: Vec<Option<usize>>,
}

impl SwingDynamics {
    pub fn new(network: Arc<PowerNetwork>, structure: usize) -> Self {
        let line_on = network.line_status(structure);
        Self::with_status(network, line_on)
    }

    pub fn with_status(network: Arc<PowerNetwork>, line_on: Vec<bool>) -> Self {
        let mut input_of_bus = vec![None; network.bus_count()];
        for (g, bus) in network.generators().into_iter().enumerate() {
            input_of_bus[bus] = Some(g);
        }
        SwingDynamics {
            network,
            line_on,
            input_of_bus,
        }
    }

    /// Flow from `i` to `l` over line `k` under the current status.
    pub fn line_flow(&self, x: &Vector, k: usize) -> f64 {
        if !self.line_on[k] {
            return 0.0;
        }
        let l = &self.network.lines[k];
        l.susceptance * (x[l.from] - x[l.to]).sin()
    }
}

impl SystemModel for SwingDynamics {
    fn state_dim(&self) -> usize {
        self.network.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.network.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    fn dynamics(&self, x: &Vector, u: &Vector, _t: f64) -> Vector {
        let net = &self.network;
        let n = net.bus_count();
        let mut dx = Vector::zeros(2 * n);
        let mut net_flow = vec![0.0; n];
        for k in 0..net.lines.len() {
            let p = self.line_flow(x, k);
            net_flow[net.lines[k].from] += p;
            net_flow[net.lines[k].to] -= p;
        }
        for i in 0..n {
            let b = &net.buses[i];
            let pm = self.input_of_bus[i].map_or(0.0, |g| u[g]);
            dx[i] = x[n + i];
            dx[n + i] = -(b.damping * x[n + i] + net_flow[i] - pm + b.load) / b.inertia;
        }
        dx
    }

    fn output(&self, x: &Vector, _u: &Vector, _t: f64) -> Vector {
        let net = &self.network;
        let n = net.bus_count();
        let mut y = Vector::zeros(3 * n);
        for i in 0..n {
            let b = &net.buses[i];
            y[3 * i] = b.load + b.damping * x[n + i];
            y[3 * i + 1] = x[i];
            y[3 * i + 2] = x[n + i];
        }
        y
    }

    fn state_jacobian(&self, x: &Vector, _u: &Vector, _t: f64) -> Matrix {
        let net = &self.network;
        let n = net.bus_count();
        let mut a = Matrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            a[(i, n + i)] = 1.0;
            a[(n + i, n + i)] = -net.buses[i].damping / net.buses[i].inertia;
        }
        for (k, l) in net.lines.iter().enumerate() {
            if !self.line_on[k] {
                continue;
            }
            let c = l.susceptance * (x[l.from] - x[l.to]).cos();
            let (mi, ml) = (net.buses[l.from].inertia, net.buses[l.to].inertia);
            a[(n + l.from, l.from)] -= c / mi;
            a[(n + l.from, l.to)] += c / mi;
            a[(n + l.to, l.to)] -= c / ml;
            a[(n + l.to, l.from)] += c / ml;
        }
        a
    }

    fn input_jacobian(&self, _x: &Vector, _u: &Vector, _t: f64) -> Matrix {
        let net = &self.network;
        let n = net.bus_count();
        let mut b = Matrix::zeros(2 * n, net.input_dim());
        for (i, g) in self.input_of_bus.iter().enumerate() {
            if let Some(g) = g {
                b[(n + i, *g)] = 1.0 / net.buses[i].inertia;
            }
        }
        b
    }

    fn output_jacobian(&self, _x: &Vector, _u: &Vector, _t: f64) -> Matrix {
        let net = &self.network;
        let n = net.bus_count();
        let mut c = Matrix::zeros(3 * n, 2 * n);
        for i in 0..n {
            c[(3 * i, n + i)] = net.buses[i].damping;
            c[(3 * i + 1, i)] = 1.0;
            c[(3 * i + 2, n + i)] = 1.0;
        }
        c
    }
}

/// Mode models for the given labels; the structure index selects open lines.
pub fn mode_models_for_network(
    network: &Arc<PowerNetwork>,
    labels: &[ModeLabel],
    process_noise: &Matrix,
    measurement_noise: &Matrix,
) -> Result<Vec<ModeModel>> {
    labels
        .iter()
        .map(|label| {
            if label.structure >= network.structure_count() {
                return Err(Error::config(
                    "modes",
                    format!("structure {} needs more than {} switchable lines", label.structure, network.switchable.len()),
                ));
            }
            ModeModel::new(
                label.clone(),
                Arc::new(SwingDynamics::new(network.clone(), label.structure)),
                process_noise.clone(),
                measurement_noise.clone(),
            )
        })
        .collect()
}

/// Time profile of an attack signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signal {
    Constant { value: f64 },
    /// `amplitude cos(omega tau)`
    Cosine { amplitude: f64, omega: f64 },
    /// `offset + amplitude sin(omega tau)`
    Sine { offset: f64, amplitude: f64, omega: f64 },
}

impl Signal {
    pub fn eval(&self, tau: f64) -> f64 {
        match *self {
            Signal::Constant { value } => value,
            Signal::Cosine { amplitude, omega } => amplitude * (omega * tau).cos(),
            Signal::Sine { offset, amplitude, omega } => offset + amplitude * (omega * tau).sin(),
        }
    }
}

/// Additive attack on one sensor (output row) or actuator (input index)
/// during `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalAttack {
    pub target: usize,
    pub start: f64,
    pub end: f64,
    pub signal: Signal,
    /// Evaluate the signal at `t - start` instead of `t`.
    #[serde(default)]
    pub relative_time: bool,
}

impl SignalAttack {
    pub fn active(&self, t: f64) -> bool {
        t >= self.start - TIME_EPS && t < self.end - TIME_EPS
    }

    pub fn value(&self, t: f64) -> f64 {
        if !self.active(t) {
            return 0.0;
        }
        self.signal.eval(if self.relative_time { t - self.start } else { t })
    }
}

/// Opens `switchable[line]` during `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchAttack {
    pub line: usize,
    pub start: f64,
    pub end: f64,
}

/// Tolerance for comparing times built from accumulated steps.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackSchedule {
    #[serde(default)]
    pub sensor_attacks: Vec<SignalAttack>,
    #[serde(default)]
    pub actuator_attacks: Vec<SignalAttack>,
    #[serde(default)]
    pub switch_attacks: Vec<SwitchAttack>,
}

impl AttackSchedule {
    pub fn validate(&self, net: &PowerNetwork, horizon: f64) -> Result<()> {
        let check = |field: &str, i: usize, a: &SignalAttack, limit: usize| -> Result<()> {
            let path = format!("attacks.{field}[{i}]");
            if a.target >= limit {
                return Err(Error::config(format!("{path}.target"), format!("index {} outside 0..{limit}", a.target)));
            }
            if !(a.start >= 0.0 && a.start < a.end && a.start <= horizon) {
                return Err(Error::config(path, format!("window [{}, {}) invalid for horizon {horizon}", a.start, a.end)));
            }
            Ok(())
        };
        for (i, a) in self.sensor_attacks.iter().enumerate() {
            check("sensor_attacks", i, a, net.output_dim())?;
        }
        for (i, a) in self.actuator_attacks.iter().enumerate() {
            check("actuator_attacks", i, a, net.input_dim())?;
        }
        for (i, s) in self.switch_attacks.iter().enumerate() {
            let path = format!("attacks.switch_attacks[{i}]");
            if s.line >= net.switchable.len() {
                return Err(Error::config(format!("{path}.line"), format!("{} switchable lines", net.switchable.len())));
            }
            if !(s.start >= 0.0 && s.start < s.end && s.start <= horizon) {
                return Err(Error::config(path, "invalid window"));
            }
        }
        Ok(())
    }

    pub fn structure_at(&self, t: f64) -> usize {
        self.switch_attacks
            .iter()
            .filter(|s| t >= s.start - TIME_EPS && t < s.end - TIME_EPS)
            .fold(0, |acc, s| acc | (1 << s.line))
    }

    /// Actuator attack vector (length `s`) at time `t`.
    pub fn actuator_values(&self, s: usize, t: f64) -> Vector {
        let mut d = Vector::zeros(s);
        for a in &self.actuator_attacks {
            d[a.target] += a.value(t);
        }
        d
    }

    /// Sensor attack vector (length `m`) at time `t`.
    pub fn sensor_values(&self, m: usize, t: f64) -> Vector {
        let mut d = Vector::zeros(m);
        for a in &self.sensor_attacks {
            d[a.target] += a.value(t);
        }
        d
    }

    /// True mode at `t`: open-line pattern plus active signal locations.
    pub fn mode_at(&self, s: usize, t: f64) -> ModeLabel {
        let act = self.actuator_attacks.iter().filter(|a| a.active(t)).map(|a| a.target);
        let sen = self.sensor_attacks.iter().filter(|a| a.active(t)).map(|a| s + a.target);
        ModeLabel::new(self.structure_at(t), AttackLocationSet::from_indices(act.chain(sen)))
    }
}

/// Buses and inputs targeted by the four-phase script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTargets {
    /// Load buses whose electrical-power sensor is attacked.
    pub sensor_buses: Vec<usize>,
    /// Attacked generator inputs.
    pub actuator_inputs: Vec<usize>,
}

impl CaseTargets {
    pub fn nine_bus() -> Self {
        CaseTargets {
            sensor_buses: vec![4, 6, 8],
            actuator_inputs: vec![0, 1, 2],
        }
    }

    pub fn synthetic_68() -> Self {
        CaseTargets {
            sensor_buses: vec![16 + 10, 16 + 37, 16 + 38],
            actuator_inputs: vec![13, 14, 15],
        }
    }

    /// Candidate attack locations, actuators first.
    pub fn locations(&self, net: &PowerNetwork) -> Vec<usize> {
        let mut v: Vec<usize> = self.actuator_inputs.clone();
        v.extend(self.sensor_buses.iter().map(|&b| net.sensor_location(b, Quantity::ElectricalPower)));
        v
    }

    pub fn sensor_set(&self, net: &PowerNetwork) -> AttackLocationSet {
        AttackLocationSet::from_indices(
            self.sensor_buses.iter().map(|&b| net.sensor_location(b, Quantity::ElectricalPower)),
        )
    }

    pub fn actuator_set(&self) -> AttackLocationSet {
        AttackLocationSet::from_indices(self.actuator_inputs.iter().copied())
    }
}

/// Sensor attacks `0.01 cos(0.12 t)` on `[0, 10)`, actuator attacks
/// `0.1 - 0.6 sin(0.3 (t - 10))` on `[10, 20)`, every switchable line open on
/// `[20, 30)`, attack-free afterwards.
pub fn build_case_study_schedule(net: &PowerNetwork, targets: &CaseTargets) -> Result<AttackSchedule> {
    for (i, &b) in targets.sensor_buses.iter().enumerate() {
        if b >= net.bus_count() {
            return Err(Error::config(format!("targets.sensor_buses[{i}]"), format!("bus {b} not in network")));
        }
    }
    for (i, &g) in targets.actuator_inputs.iter().enumerate() {
        if g >= net.input_dim() {
            return Err(Error::config(format!("targets.actuator_inputs[{i}]"), format!("input {g} not in network")));
        }
    }
    let sensor_attacks = targets
        .sensor_buses
        .iter()
        .map(|&b| SignalAttack {
            target: net.output_index(b, Quantity::ElectricalPower),
            start: 0.0,
            end: 10.0,
            signal: Signal::Cosine {
                amplitude: 0.01,
                omega: 0.12,
            },
            relative_time: false,
        })
        .collect();
    let actuator_attacks = targets
        .actuator_inputs
        .iter()
        .map(|&g| SignalAttack {
            target: g,
            start: 10.0,
            end: 20.0,
            signal: Signal::Sine {
                offset: 0.1,
                amplitude: -0.6,
                omega: 0.3,
            },
            relative_time: true,
        })
        .collect();
    let switch_attacks = (0..net.switchable.len())
        .map(|line| SwitchAttack {
            line,
            start: 20.0,
            end: 30.0,
        })
        .collect();
    Ok(AttackSchedule {
        sensor_attacks,
        actuator_attacks,
        switch_attacks,
    })
}

/// Frequency droop `u = p_ref - kappa f_measured` on the generator buses.
#[derive(Debug, Clone, PartialEq)]
pub struct DroopController {
    pub p_ref: Vector,
    pub kappa: f64,
}

impl DroopController {
    pub fn balanced(net: &PowerNetwork, kappa: f64) -> Self {
        DroopController {
            p_ref: net.balanced_set_points(),
            kappa,
        }
    }

    pub fn input(&self, net: &PowerNetwork, y: &Vector) -> Vector {
        let gens = net.generators();
        Vector::from_iterator(
            gens.len(),
            gens.iter()
                .enumerate()
                .map(|(g, &b)| self.p_ref[g] - self.kappa * y[net.output_index(b, Quantity::Frequency)]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Apply process and measurement noise.
    pub noisy: bool,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub modes: Vec<ModeLabel>,
    pub clean_outputs: Vec<Vector>,
    pub outputs: Vec<Vector>,
    /// Commanded input held over `(t_k, t_{k+1}]`.
    pub inputs: Vec<Vector>,
    /// True attack in location coordinates at `t_k` (length `s + m`).
    pub attacks: Vec<Vector>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn noise_factor(cov: &Matrix, what: &str) -> Result<Matrix> {
    if cov.amax() == 0.0 {
        return Ok(Matrix::zeros(cov.nrows(), cov.ncols()));
    }
    cov.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Domain(format!("{what} covariance must be positive definite")))
}

fn gaussian(rng: &mut ChaCha8Rng, factor: &Matrix) -> Vector {
    let xi = Vector::from_iterator(factor.ncols(), (0..factor.ncols()).map(|_| StandardNormal.sample(rng)));
    factor * xi
}

/// Seeded generator of the plant's process and measurement noise.
///
/// Process increments are drawn per integrator substep with covariance
/// `h dt Q`, so the `SUBSTEPS` increments of one sampling period sum to
/// `dt w` with `E[w w^T] = Q`.
pub struct NoiseSource {
    rng: ChaCha8Rng,
    process: Matrix,
    measurement: Matrix,
}

impl NoiseSource {
    pub fn new(process_noise: &Matrix, measurement_noise: &Matrix, dt: f64, seed: u64) -> Result<Self> {
        let h = dt / SUBSTEPS as f64;
        Ok(NoiseSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            process: noise_factor(&(process_noise * (h * dt)), "process noise")?,
            measurement: noise_factor(measurement_noise, "measurement noise")?,
        })
    }

    /// One substep increment of the state.
    pub fn process_increment(&mut self) -> Vector {
        gaussian(&mut self.rng, &self.process)
    }

    pub fn measurement(&mut self) -> Vector {
        gaussian(&mut self.rng, &self.measurement)
    }
}

/// Simulates the switched swing dynamics under attack.
///
/// Process noise has intensity `dt * Q` per unit time so that one sampling
/// period accumulates covariance `dt^2 Q`, the same as the estimator's
/// discrete model. `x0` is the initial state.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    net: &Arc<PowerNetwork>,
    schedule: &AttackSchedule,
    controller: &DroopController,
    process_noise: &Matrix,
    measurement_noise: &Matrix,
    x0: &Vector,
    cfg: &SimConfig,
) -> Result<SimTrace> {
    if !(cfg.dt > 0.0 && cfg.horizon >= 0.0) {
        return Err(Error::Domain("sampling period must be positive and horizon non-negative".into()));
    }
    net.validate()?;
    schedule.validate(net, cfg.horizon)?;
    let (n, s, m) = (net.state_dim(), net.input_dim(), net.output_dim());
    if x0.len() != n {
        return Err(Error::dim("simulate x0", n, x0.len()));
    }
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let h = cfg.dt / SUBSTEPS as f64;
    let mut noise = NoiseSource::new(process_noise, measurement_noise, cfg.dt, cfg.seed)?;
    let models: Vec<SwingDynamics> = (0..net.structure_count()).map(|j| SwingDynamics::new(net.clone(), j)).collect();

    let mut trace = SimTrace {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        modes: Vec::with_capacity(steps + 1),
        clean_outputs: Vec::with_capacity(steps + 1),
        outputs: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        attacks: Vec::with_capacity(steps + 1),
    };
    let u_zero = Vector::zeros(s);
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let clean = models[schedule.structure_at(t)].output(&x, &u_zero, t);
        let ds = schedule.sensor_values(m, t);
        let mut y = &clean + &ds;
        if cfg.noisy {
            y += noise.measurement();
        }
        let u = controller.input(net, &y);
        let mut attack = Vector::zeros(s + m);
        attack.rows_mut(0, s).copy_from(&schedule.actuator_values(s, t));
        attack.rows_mut(s, m).copy_from(&ds);

        trace.times.push(t);
        trace.states.push(x.clone());
        trace.modes.push(schedule.mode_at(s, t));
        trace.clean_outputs.push(clean);
        trace.outputs.push(y);
        trace.inputs.push(u.clone());
        trace.attacks.push(attack);
        if k == steps {
            break;
        }

        for i in 0..SUBSTEPS {
            let ti = t + i as f64 * h;
            let model = &models[schedule.structure_at(ti)];
            let f = |tt: f64, xx: &Vector| model.dynamics(xx, &(&u + schedule.actuator_values(s, tt)), tt);
            x = crate::ode::step(crate::ode::Integrator::Rk4, &f, ti, &x, h);
            if cfg.noisy {
                x += noise.process_increment();
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    time: ti + h,
                    what: "plant state is not finite".into(),
                });
            }
        }
    }
    Ok(trace)
}

/// Samples `N(mean, cov)` with the given seed.
pub fn sample_initial_state(mean: &Vector, cov: &Matrix, seed: u64) -> Result<Vector> {
    let l = noise_factor(cov, "initial")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(mean + gaussian(&mut rng, &l))
}

/// Formats a float with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Column names of the trace CSV.
pub fn trace_header(net: &PowerNetwork) -> Vec<String> {
    let n = net.bus_count();
    let mut h = vec!["time".to_string()];
    h.extend((0..n).map(|i| format!("theta_{i}")));
    h.extend((0..n).map(|i| format!("f_{i}")));
    for i in 0..n {
        h.push(format!("y_pelec_{i}"));
        h.push(format!("y_theta_{i}"));
        h.push(format!("y_f_{i}"));
    }
    h.push("true_structure".into());
    h.push("true_attacks".into());
    h.extend((0..net.input_dim()).map(|g| format!("u_{g}")));
    h.extend((0..net.input_dim() + net.output_dim()).map(|l| format!("d_{l}")));
    h
}

/// Writes the trace as CSV (header row, LF line ends).
pub fn write_trace_csv(trace: &SimTrace, net: &PowerNetwork, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(trace_header(net)).map_err(io)?;
    for k in 0..trace.len() {
        let mut row = vec![fmt_float(trace.times[k])];
        row.extend(trace.states[k].iter().map(|&v| fmt_float(v)));
        row.extend(trace.outputs[k].iter().map(|&v| fmt_float(v)));
        row.push(trace.modes[k].structure.to_string());
        row.push(trace.modes[k].attacks.to_string());
        row.extend(trace.inputs[k].iter().map(|&v| fmt_float(v)));
        row.extend(trace.attacks[k].iter().map(|&v| fmt_float(v)));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
