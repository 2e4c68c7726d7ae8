//! Fixed-step closed-loop engine.
//!
//! Each step samples the schedules, runs the controller once (the control
//! rate equals the integration rate), routes the commanded duty through the
//! actuation delay line, optionally through a PWM comparator, and advances
//! the plant with classical RK4 under a zero-order hold.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{esmc_step, gitsmbc_step, ControlError, ControllerState, EsmcGains, EsmcState, GitsmbcGains};
use crate::plant::{plant_derivatives, PlantDerivative, PlantError, PlantParams, PlantState};
use crate::transform::{
    linearization_coeffs, reference_frame, to_canonical, CanonicalState, LinearizationCoeffs, TransformError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("plant collapsed at t = {time:.6} s (v_dc = {v_dc:.4} V)")]
    Collapse { time: f64, v_dc: f64 },
    #[error("numerical blow-up at t = {time:.6} s")]
    Blowup { time: f64 },
    #[error("plant model error at t = {time:.6} s: {source}")]
    Plant { time: f64, source: PlantError },
    #[error("controller error at t = {time:.6} s: {source}")]
    Control { time: f64, source: ControlError },
    #[error("invalid simulation setup: {0}")]
    InvalidSetup(String),
}

impl SimError {
    fn from_plant(time: f64, e: PlantError) -> Self {
        match e {
            PlantError::Collapse { v_dc } => SimError::Collapse { time, v_dc },
            source => SimError::Plant { time, source },
        }
    }
}

// ---------------------------------------------------------------------------
// Signals and schedules

/// Time function used for delays and injected disturbances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Signal {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `offset + amplitude·sin(2π·freq_hz·t)`
    Sine {
        offset: f64,
        amplitude: f64,
        freq_hz: f64,
    },
}

impl Signal {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Signal::Zero => 0.0,
            Signal::Constant { value } => value,
            Signal::Sine { offset, amplitude, freq_hz } => offset + amplitude * (2.0 * PI * freq_hz * t).sin(),
        }
    }

    pub fn upper_bound(&self) -> f64 {
        match *self {
            Signal::Zero => 0.0,
            Signal::Constant { value } => value,
            Signal::Sine { offset, amplitude, .. } => offset + amplitude.abs(),
        }
    }

    pub fn lower_bound(&self) -> f64 {
        match *self {
            Signal::Zero => 0.0,
            Signal::Constant { value } => value,
            Signal::Sine { offset, amplitude, .. } => offset - amplitude.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    /// Start of the segment, s.
    pub t: f64,
    pub value: f64,
}

/// Piecewise-constant schedule; each breakpoint holds until the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule(pub Vec<Breakpoint>);

// Step instants land on the sample grid only up to rounding.
const SCHEDULE_EPS: f64 = 1e-9;

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule(vec![Breakpoint { t: 0.0, value }])
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Schedule(pairs.iter().map(|&(t, value)| Breakpoint { t, value }).collect())
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let mut v = self.0.first().map_or(f64::NAN, |b| b.value);
        for b in &self.0 {
            if t + SCHEDULE_EPS >= b.t {
                v = b.value;
            } else {
                break;
            }
        }
        v
    }

    /// Instants where the value changes (the first breakpoint excluded).
    pub fn change_times(&self) -> Vec<f64> {
        self.0.windows(2).filter(|w| w[0].value != w[1].value).map(|w| w[1].t).collect()
    }

    fn validate(&self, name: &str) -> Result<(), SimError> {
        let first = self.0.first().ok_or_else(|| SimError::InvalidSetup(format!("{name} schedule is empty")))?;
        if first.t > 0.0 {
            return Err(SimError::InvalidSetup(format!("{name} schedule must start at t = 0")));
        }
        if self.0.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(SimError::InvalidSetup(format!("{name} schedule times must be strictly increasing")));
        }
        if self.0.iter().any(|b| !(b.value.is_finite() && b.value > 0.0)) {
            return Err(SimError::InvalidSetup(format!("{name} schedule values must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub v_ref: Schedule,
    pub v_in: Schedule,
    /// Actuation delay, s.
    #[serde(default)]
    pub delay: Signal,
    /// Injected on the observed energy rate, W.
    #[serde(default)]
    pub ed1: Signal,
    /// Injected on the energy-rate dynamics, W/s.
    #[serde(default)]
    pub ed2: Signal,
}

impl ScenarioSpec {
    /// Reference step 100 V → 150 V at 0.54 s with a stiff 50 V supply.
    pub fn scenario1() -> Self {
        ScenarioSpec {
            v_ref: Schedule::from_pairs(&[(0.0, 100.0), (0.54, 150.0)]),
            v_in: Schedule::constant(50.0),
            delay: Signal::Zero,
            ed1: Signal::Zero,
            ed2: Signal::Zero,
        }
    }

    /// Two 0.1 s supply sags to 40 V under a jittering actuation delay.
    pub fn scenario2() -> Self {
        ScenarioSpec {
            v_ref: Schedule::constant(100.0),
            v_in: Schedule::from_pairs(&[(0.0, 50.0), (0.5, 40.0), (0.6, 50.0), (1.0, 40.0), (1.1, 50.0)]),
            delay: Signal::Sine { offset: 0.001, amplitude: 0.0005, freq_hz: 10.0 },
            ed1: Signal::Zero,
            ed2: Signal::Zero,
        }
    }

    /// Transient events: t = 0, every reference change and every onset of a
    /// supply disturbance (a drop below the initial supply voltage).
    pub fn event_times(&self) -> Vec<f64> {
        let mut ev = vec![0.0];
        ev.extend(self.v_ref.change_times());
        let nominal = self.v_in.value_at(0.0);
        for w in self.v_in.0.windows(2) {
            if w[1].value < nominal && w[0].value >= nominal {
                ev.push(w[1].t);
            }
        }
        ev.sort_by(f64::total_cmp);
        ev.dedup();
        ev
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.v_ref.validate("v_ref")?;
        self.v_in.validate("v_in")?;
        if self.delay.lower_bound() < 0.0 {
            return Err(SimError::InvalidSetup("delay must be non-negative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Averaged,
    Switched,
}

/// How the virtual-capacitor power enters the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualCapMode {
    /// The bus behaves as `c_dc + c_vir`; no separate injection term.
    Emulated,
    /// `ΔP = v·c_vir·(dv/dt)` from the previous accepted step is injected on
    /// the bus and added to the energy rate.
    LaggedInjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Bus pre-charged to `v_dc`, inductor carrying the CPL steady current
    /// `p_cpl / v_in(0)`; an equilibrium for duty `1 − v_in/v_dc`.
    Precharged {
        v_dc: f64,
    },
    /// Converter at rest: `i_l = 0`, `v_dc = v_in(0)`.
    SupplyRest,
    Explicit {
        i_l: f64,
        v_dc: f64,
    },
}

impl InitialCondition {
    pub fn resolve(&self, params: &PlantParams, v_in0: f64) -> PlantState {
        match *self {
            InitialCondition::Precharged { v_dc } => PlantState::new(params.p_cpl / v_in0, v_dc),
            InitialCondition::SupplyRest => PlantState::new(0.0, v_in0),
            InitialCondition::Explicit { i_l, v_dc } => PlantState::new(i_l, v_dc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub model_mode: ModelMode,
    pub f_switch: f64,
    pub record_decimation: usize,
    pub initial: InitialCondition,
    pub virtual_cap: VirtualCapMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-5,
            duration: 1.5,
            model_mode: ModelMode::Averaged,
            f_switch: 1e4,
            record_decimation: 10,
            initial: InitialCondition::Precharged { v_dc: 80.0 },
            virtual_cap: VirtualCapMode::Emulated,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::InvalidSetup("dt must be > 0".into()));
        }
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(SimError::InvalidSetup("duration must be >= 0".into()));
        }
        if self.record_decimation == 0 {
            return Err(SimError::InvalidSetup("record_decimation must be >= 1".into()));
        }
        if self.model_mode == ModelMode::Switched {
            if !(self.f_switch.is_finite() && self.f_switch > 0.0) {
                return Err(SimError::InvalidSetup("f_switch must be > 0".into()));
            }
            if self.dt > 1.0 / (10.0 * self.f_switch) * (1.0 + 1e-9) {
                return Err(SimError::InvalidSetup("dt must be <= 1/(10·f_switch) in switched mode".into()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Gitsmbc,
    Esmc,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Gitsmbc => "gitsmbc",
            ControllerKind::Esmc => "esmc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Controller {
    Gitsmbc(GitsmbcGains),
    Esmc(EsmcGains),
}

impl Controller {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::Gitsmbc(_) => ControllerKind::Gitsmbc,
            Controller::Esmc(_) => ControllerKind::Esmc,
        }
    }
}

// ---------------------------------------------------------------------------
// Integrator

/// State that RK4 can advance.
pub trait OdeState: Copy {
    type Deriv: Copy;
    /// `self + h·d`
    fn advance(&self, h: f64, d: &Self::Deriv) -> Self;
    /// `(k1 + 2k2 + 2k3 + k4) / 6`
    fn rk4_mix(k: [&Self::Deriv; 4]) -> Self::Deriv;
    fn is_finite(&self) -> bool;
}

impl OdeState for f64 {
    type Deriv = f64;
    fn advance(&self, h: f64, d: &f64) -> f64 {
        self + h * d
    }
    fn rk4_mix(k: [&f64; 4]) -> f64 {
        (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3]) / 6.0
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl OdeState for PlantState {
    type Deriv = PlantDerivative;
    fn advance(&self, h: f64, d: &PlantDerivative) -> PlantState {
        PlantState::new(self.i_l + h * d.di_l_dt, self.v_dc + h * d.dv_dc_dt)
    }
    fn rk4_mix(k: [&PlantDerivative; 4]) -> PlantDerivative {
        PlantDerivative {
            di_l_dt: (k[0].di_l_dt + 2.0 * k[1].di_l_dt + 2.0 * k[2].di_l_dt + k[3].di_l_dt) / 6.0,
            dv_dc_dt: (k[0].dv_dc_dt + 2.0 * k[1].dv_dc_dt + 2.0 * k[2].dv_dc_dt + k[3].dv_dc_dt) / 6.0,
        }
    }
    fn is_finite(&self) -> bool {
        PlantState::is_finite(self)
    }
}

/// One classical Runge–Kutta step of length `dt` starting at time `t`.
pub fn rk4_step<S, F>(mut f: F, state: S, t: f64, dt: f64) -> Result<S, SimError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S::Deriv, SimError>,
{
    let k1 = f(t, &state)?;
    let k2 = f(t + 0.5 * dt, &state.advance(0.5 * dt, &k1))?;
    let k3 = f(t + 0.5 * dt, &state.advance(0.5 * dt, &k2))?;
    let k4 = f(t + dt, &state.advance(dt, &k3))?;
    let next = state.advance(dt, &S::rk4_mix([&k1, &k2, &k3, &k4]));
    if next.is_finite() {
        Ok(next)
    } else {
        Err(SimError::Blowup { time: t + dt })
    }
}

// ---------------------------------------------------------------------------
// Actuation path

/// History of commanded duty used to realize a time-varying delay.
#[derive(Debug, Clone)]
pub struct DelayLine {
    samples: VecDeque<(f64, f64)>,
    capacity: usize,
}

impl DelayLine {
    /// Buffer sized for delays up to `max_delay` at sample period `dt`.
    pub fn new(max_delay: f64, dt: f64) -> Self {
        let capacity = (max_delay / dt).ceil() as usize + 3;
        DelayLine { samples: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, t: f64, value: f64) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((t, value));
    }

    /// Value at time `t_query`, linearly interpolated between stored samples;
    /// queries before the oldest sample return the oldest value.
    pub fn sample(&self, t_query: f64) -> f64 {
        let Some(&(t_last, u_last)) = self.samples.back() else {
            return f64::NAN;
        };
        if t_query >= t_last {
            return u_last;
        }
        let (t_first, u_first) = self.samples[0];
        if t_query <= t_first {
            return u_first;
        }
        let idx = self.samples.partition_point(|&(t, _)| t <= t_query);
        let (t0, u0) = self.samples[idx - 1];
        let (t1, u1) = self.samples[idx];
        if t_query == t0 {
            return u0;
        }
        u0 + (u1 - u0) * (t_query - t0) / (t1 - t0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stores `commanded` at `t` and returns the command issued `delay(t)` ago.
pub fn delay_apply(buffer: &mut DelayLine, commanded: f64, t: f64, delay: &Signal) -> f64 {
    buffer.push(t, commanded);
    buffer.sample(t - delay.eval(t).max(0.0))
}

/// Carrier comparator: 1 while `frac(t·f_switch) < duty`.
pub fn pwm_modulate(duty: f64, t: f64, f_switch: f64) -> u8 {
    let x = t * f_switch;
    let phase = x - x.floor();
    u8::from(phase < duty)
}

/// Splits `[t, t + dt)` into maximal intervals of constant comparator output.
pub fn pwm_segments(duty: f64, t: f64, dt: f64, f_switch: f64) -> Vec<(f64, f64, u8)> {
    let period = 1.0 / f_switch;
    let end = t + dt;
    let mut out: Vec<(f64, f64, u8)> = Vec::new();
    let mut n = (t * f_switch).floor();
    loop {
        let start = n * period;
        if start >= end {
            break;
        }
        let edge = start + duty * period;
        for (a, b, level) in [(start, edge, 1u8), (edge, start + period, 0u8)] {
            let a = a.max(t);
            let b = b.min(end);
            if b - a > 1e-12 * dt {
                match out.last_mut() {
                    Some(last) if last.2 == level => last.1 = b,
                    _ => out.push((a, b, level)),
                }
            }
        }
        n += 1.0;
    }
    out
}

// ---------------------------------------------------------------------------
// Recording

pub const TIMESERIES_COLUMNS: [&str; 11] =
    ["time", "v_dc", "i_l", "mu_commanded", "mu_applied", "v_ref", "v_in", "e1", "e2", "sigma_s", "theta2"];

/// One recorded row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub v_dc: f64,
    pub i_l: f64,
    pub mu_commanded: f64,
    pub mu_applied: f64,
    pub v_ref: f64,
    pub v_in: f64,
    pub e1: f64,
    pub e2: f64,
    pub sigma_s: f64,
    pub theta2: f64,
}

impl Sample {
    pub fn as_row(&self) -> [f64; 11] {
        [
            self.time,
            self.v_dc,
            self.i_l,
            self.mu_commanded,
            self.mu_applied,
            self.v_ref,
            self.v_in,
            self.e1,
            self.e2,
            self.sigma_s,
            self.theta2,
        ]
    }
}

/// Column-oriented trajectory sampled every `dt·record_decimation`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeSeries {
    pub time: Vec<f64>,
    pub v_dc: Vec<f64>,
    pub i_l: Vec<f64>,
    pub mu_commanded: Vec<f64>,
    pub mu_applied: Vec<f64>,
    pub v_ref: Vec<f64>,
    pub v_in: Vec<f64>,
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
    pub sigma_s: Vec<f64>,
    pub theta2: Vec<f64>,
}

impl TimeSeries {
    pub fn push(&mut self, s: &Sample) {
        self.time.push(s.time);
        self.v_dc.push(s.v_dc);
        self.i_l.push(s.i_l);
        self.mu_commanded.push(s.mu_commanded);
        self.mu_applied.push(s.mu_applied);
        self.v_ref.push(s.v_ref);
        self.v_in.push(s.v_in);
        self.e1.push(s.e1);
        self.e2.push(s.e2);
        self.sigma_s.push(s.sigma_s);
        self.theta2.push(s.theta2);
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn row(&self, k: usize) -> Sample {
        Sample {
            time: self.time[k],
            v_dc: self.v_dc[k],
            i_l: self.i_l[k],
            mu_commanded: self.mu_commanded[k],
            mu_applied: self.mu_applied[k],
            v_ref: self.v_ref[k],
            v_in: self.v_in[k],
            e1: self.e1[k],
            e2: self.e2[k],
            sigma_s: self.sigma_s[k],
            theta2: self.theta2[k],
        }
    }

    /// Builds a series carrying only time, bus voltage and reference.
    pub fn from_voltage(time: Vec<f64>, v_dc: Vec<f64>, v_ref: Vec<f64>) -> Self {
        let n = time.len();
        assert!(v_dc.len() == n && v_ref.len() == n, "column lengths differ");
        let zeros = vec![0.0; n];
        TimeSeries {
            time,
            v_dc,
            v_ref,
            i_l: zeros.clone(),
            mu_commanded: zeros.clone(),
            mu_applied: zeros.clone(),
            v_in: zeros.clone(),
            e1: zeros.clone(),
            e2: zeros.clone(),
            sigma_s: zeros.clone(),
            theta2: zeros,
        }
    }
}

// ---------------------------------------------------------------------------
// Engine

/// Everything computed during one control period, before the plant advances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub state: PlantState,
    pub v_ref: f64,
    pub v_in: f64,
    pub delta_p_vir: f64,
    pub canonical: CanonicalState,
    pub coeffs: Option<LinearizationCoeffs>,
    pub mu_commanded: f64,
    /// Duty held over `[time, time + dt)`; in switched mode the carrier
    /// average of the comparator over that interval.
    pub mu_applied: f64,
    pub sample: Sample,
}

#[derive(Debug, Clone, Copy)]
enum CtrlState {
    Gitsmbc(ControllerState),
    Esmc(EsmcState),
}

/// A single closed-loop simulation instance.
#[derive(Debug, Clone)]
pub struct Simulation {
    params: PlantParams,
    spec: ScenarioSpec,
    config: SimConfig,
    controller: Controller,
    state: PlantState,
    ctrl: CtrlState,
    delay: DelayLine,
    dv_prev: f64,
    step_index: usize,
}

impl Simulation {
    pub fn new(
        params: PlantParams,
        spec: ScenarioSpec,
        config: SimConfig,
        controller: Controller,
    ) -> Result<Self, SimError> {
        params.validate().map_err(|e| SimError::InvalidSetup(e.to_string()))?;
        spec.validate()?;
        config.validate()?;
        match &controller {
            Controller::Gitsmbc(g) => g.validate(),
            Controller::Esmc(g) => g.validate(),
        }
        .map_err(|e| SimError::InvalidSetup(e.to_string()))?;

        let state = config.initial.resolve(&params, spec.v_in.value_at(0.0));
        let ctrl = match controller {
            Controller::Gitsmbc(_) => CtrlState::Gitsmbc(ControllerState::default()),
            Controller::Esmc(_) => CtrlState::Esmc(EsmcState::default()),
        };
        let delay = DelayLine::new(spec.delay.upper_bound(), config.dt);
        Ok(Simulation { params, spec, config, controller, state, ctrl, delay, dv_prev: 0.0, step_index: 0 })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.config.dt
    }

    pub fn state(&self) -> PlantState {
        self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    fn delta_p_vir(&self, v_dc: f64) -> f64 {
        match self.config.virtual_cap {
            VirtualCapMode::Emulated => 0.0,
            VirtualCapMode::LaggedInjection => v_dc * self.params.c_vir * self.dv_prev,
        }
    }

    /// Runs the controller at the current instant without advancing.
    fn control(&mut self) -> Result<StepRecord, SimError> {
        let t = self.time();
        let p = &self.params;
        let v_ref = self.spec.v_ref.value_at(t);
        let v_in = self.spec.v_in.value_at(t);
        let refs = reference_frame(v_ref, v_in, p);
        let dp = self.delta_p_vir(self.state.v_dc);
        let canon = to_canonical(self.state, p, v_in, dp);
        let observed = CanonicalState { zeta2: canon.zeta2 + self.spec.ed1.eval(t), ..canon };
        let e1 = canon.zeta1 - refs.zeta1_ref;

        let (mu_cmd, coeffs, e2, sigma, theta2) = match (&self.controller, &mut self.ctrl) {
            (Controller::Gitsmbc(g), CtrlState::Gitsmbc(cs)) => {
                let coeffs = linearization_coeffs(self.state, p, v_in, dp).map_err(|e| match e {
                    TransformError::Singular { b_x, .. } => {
                        SimError::Control { time: t, source: ControlError::Singular { b_x } }
                    }
                })?;
                let out = gitsmbc_step(observed, &refs, coeffs, *cs, g, self.config.dt)
                    .map_err(|source| SimError::Control { time: t, source })?;
                *cs = out.state;
                let d = out.diagnostics;
                (out.mu, Some(coeffs), d.e2, d.sigma_s, d.theta2)
            }
            (Controller::Esmc(g), CtrlState::Esmc(es)) => {
                let out = esmc_step(self.state, &refs, v_in, g, *es, self.config.dt)
                    .map_err(|source| SimError::Control { time: t, source })?;
                *es = out.state;
                let coeffs = linearization_coeffs(self.state, p, v_in, dp).ok();
                let e2 = observed.zeta2 - refs.zeta1_ref_dot;
                (out.mu, coeffs, e2, out.surface, 0.5 * e1 * e1 + 0.5 * out.surface * out.surface)
            }
            _ => unreachable!("controller state matches controller kind"),
        };

        let delayed = delay_apply(&mut self.delay, mu_cmd, t, &self.spec.delay);
        let mu_applied = match self.config.model_mode {
            ModelMode::Averaged => delayed,
            ModelMode::Switched => {
                let dt = self.config.dt;
                (pwm_segments(delayed, t, dt, self.config.f_switch)
                    .iter()
                    .map(|&(a, b, level)| f64::from(level) * (b - a))
                    .sum::<f64>()
                    / dt)
                    .clamp(0.0, 1.0)
            }
        };

        let sample = Sample {
            time: t,
            v_dc: self.state.v_dc,
            i_l: self.state.i_l,
            mu_commanded: mu_cmd,
            mu_applied,
            v_ref,
            v_in,
            e1,
            e2,
            sigma_s: sigma,
            theta2,
        };
        Ok(StepRecord {
            time: t,
            state: self.state,
            v_ref,
            v_in,
            delta_p_vir: dp,
            canonical: observed,
            coeffs,
            mu_commanded: mu_cmd,
            mu_applied,
            sample,
        })
    }

    fn advance(&mut self, rec: &StepRecord) -> Result<(), SimError> {
        let t = rec.time;
        let dt = self.config.dt;
        let params = self.params;
        let v_in = rec.v_in;
        let ed2 = self.spec.ed2.eval(t);
        let lagged = self.config.virtual_cap == VirtualCapMode::LaggedInjection;
        let c_vir_rate = params.c_vir * self.dv_prev;

        let rhs = |mu: f64| {
            move |tt: f64, s: &PlantState| -> Result<PlantDerivative, SimError> {
                let dp = if lagged { s.v_dc * c_vir_rate } else { 0.0 };
                let mut d = plant_derivatives(*s, mu, v_in, dp, &params).map_err(|e| SimError::from_plant(tt, e))?;
                d.di_l_dt += ed2 / v_in;
                Ok(d)
            }
        };

        let mut state = self.state;
        match self.config.model_mode {
            ModelMode::Averaged => {
                state = rk4_step(rhs(rec.mu_applied), state, t, dt)?;
            }
            ModelMode::Switched => {
                let delayed = self.delay.sample(t - self.spec.delay.eval(t).max(0.0));
                for (a, b, level) in pwm_segments(delayed, t, dt, self.config.f_switch) {
                    state = rk4_step(rhs(f64::from(level)), state, a, b - a)?;
                }
            }
        }
        if params.p_cpl > 0.0 && state.v_dc <= 0.0 {
            return Err(SimError::Collapse { time: t + dt, v_dc: state.v_dc });
        }
        let dp_next = if lagged { state.v_dc * c_vir_rate } else { 0.0 };
        let d = plant_derivatives(state, rec.mu_applied, v_in, dp_next, &params)
            .map_err(|e| SimError::from_plant(t + dt, e))?;
        self.dv_prev = d.dv_dc_dt;
        self.state = state;
        self.step_index += 1;
        Ok(())
    }

    /// Runs the controller at the current instant, then advances the plant
    /// by one step. Returns what was computed before the advance.
    pub fn step(&mut self) -> Result<StepRecord, SimError> {
        let rec = self.control()?;
        self.advance(&rec)?;
        Ok(rec)
    }

    /// Controller evaluation at the current instant without advancing; used
    /// for the final sample of a run.
    pub fn peek(&mut self) -> Result<StepRecord, SimError> {
        let saved_ctrl = self.ctrl;
        let saved_delay = self.delay.clone();
        let rec = self.control();
        self.ctrl = saved_ctrl;
        self.delay = saved_delay;
        rec
    }
}

/// Abort of a run, carrying the trajectory recorded up to the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct SimAbort {
    pub error: SimError,
    pub partial: TimeSeries,
}

#[allow(clippy::result_large_err)]
pub fn run_scenario(
    spec: &ScenarioSpec,
    config: &SimConfig,
    controller: Controller,
    params: &PlantParams,
) -> Result<TimeSeries, SimAbort> {
    let mut series = TimeSeries::default();
    let mut sim = match Simulation::new(*params, spec.clone(), *config, controller) {
        Ok(s) => s,
        Err(error) => return Err(SimAbort { error, partial: series }),
    };
    let n = config.steps();
    for k in 0..=n {
        let rec = if k < n { sim.step() } else { sim.peek() };
        match rec {
            Ok(rec) => {
                if k % config.record_decimation == 0 {
                    series.push(&rec.sample);
                }
            }
            Err(error) => return Err(SimAbort { error, partial: series }),
        }
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rk4_scalar_decay() {
        let x = rk4_step(|_, x: &f64| Ok(-x), 1.0, 0.0, 0.1).unwrap();
        assert_relative_eq!(x, 0.9048375, epsilon = 1e-7);
        assert!((x - (-0.1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_zero_and_constant_derivative() {
        assert_eq!(rk4_step(|_, _: &f64| Ok(0.0), 3.25, 0.0, 0.1).unwrap(), 3.25);
        let x = rk4_step(|_, _: &f64| Ok(2.0), 1.0, 0.0, 0.25).unwrap();
        assert_eq!(x, 1.5);
    }

    #[test]
    fn rk4_reports_blowup() {
        let err = rk4_step(|_, _: &f64| Ok(f64::INFINITY), 1.0, 0.3, 0.1).unwrap_err();
        assert!(matches!(err, SimError::Blowup { time } if (time - 0.4).abs() < 1e-12));
    }

    #[test]
    fn delay_constant_command() {
        let mut d = DelayLine::new(0.002, 1e-5);
        let sig = Signal::Constant { value: 1e-3 };
        for k in 0..500 {
            let out = delay_apply(&mut d, 0.5, k as f64 * 1e-5, &sig);
            assert_eq!(out, 0.5);
        }
    }

    #[test]
    fn delay_shifts_a_ramp() {
        let dt = 1e-5;
        let mut d = DelayLine::new(0.001, dt);
        let sig = Signal::Constant { value: 1e-3 };
        let mut out = 0.0;
        for k in 0..=10_000 {
            let t = k as f64 * dt;
            out = delay_apply(&mut d, t, t, &sig);
        }
        assert_relative_eq!(out, 0.099, epsilon = 1e-9);
    }

    #[test]
    fn delay_before_history_returns_oldest() {
        let mut d = DelayLine::new(0.01, 1e-3);
        assert_eq!(delay_apply(&mut d, 0.7, 0.0, &Signal::Constant { value: 0.005 }), 0.7);
        assert_eq!(delay_apply(&mut d, 0.1, 0.001, &Signal::Constant { value: 0.005 }), 0.7);
    }

    #[test]
    fn delay_buffer_is_bounded() {
        let mut d = DelayLine::new(0.001, 1e-5);
        for k in 0..10_000 {
            d.push(k as f64 * 1e-5, 0.0);
        }
        assert!(d.len() <= 103);
    }

    #[test]
    fn jitter_delay_peak() {
        let sig = ScenarioSpec::scenario2().delay;
        assert_relative_eq!(sig.eval(0.025), 0.0015, epsilon = 1e-12);
        assert_relative_eq!(sig.upper_bound(), 0.0015);
    }

    #[test]
    fn pwm_examples() {
        for k in 0..100 {
            let t = k as f64 * 1.3e-5;
            assert_eq!(pwm_modulate(0.0, t, 1e4), 0);
            assert_eq!(pwm_modulate(1.0, t, 1e4), 1);
        }
        assert_eq!(pwm_modulate(0.5, 0.25e-4, 1e4), 1);
        assert_eq!(pwm_modulate(0.5, 0.75e-4, 1e4), 0);
    }

    #[test]
    fn pwm_segments_cover_step_and_match_comparator() {
        let f = 1e4;
        for &duty in &[0.0, 0.13, 0.5, 0.87, 1.0] {
            for k in 0..25 {
                let t = k as f64 * 1e-5;
                let segs = pwm_segments(duty, t, 1e-5, f);
                assert_relative_eq!(segs.first().unwrap().0, t, epsilon = 1e-15);
                assert_relative_eq!(segs.last().unwrap().1, t + 1e-5, epsilon = 1e-15);
                for w in segs.windows(2) {
                    assert_relative_eq!(w[0].1, w[1].0, epsilon = 1e-15);
                }
                for (a, b, level) in segs {
                    assert_eq!(pwm_modulate(duty, 0.5 * (a + b), f), level);
                }
            }
        }
    }

    #[test]
    fn pwm_average_over_period_is_duty() {
        let dt = 1e-5;
        let on: f64 = (0..10)
            .flat_map(|k| pwm_segments(0.37, k as f64 * dt, dt, 1e4))
            .map(|(a, b, l)| f64::from(l) * (b - a))
            .sum();
        assert_relative_eq!(on / 1e-4, 0.37, epsilon = 1e-9);
    }

    #[test]
    fn scenario_definitions() {
        let s1 = ScenarioSpec::scenario1();
        assert_eq!(s1.v_ref.value_at(0.0), 100.0);
        assert_eq!(s1.v_ref.value_at(0.5399), 100.0);
        assert_eq!(s1.v_ref.value_at(54_000.0 * 1e-5), 150.0);
        assert_eq!(s1.v_ref.value_at(1.5), 150.0);
        assert_eq!(s1.v_in.value_at(1.2), 50.0);
        assert_eq!(s1.event_times(), vec![0.0, 0.54]);

        let s2 = ScenarioSpec::scenario2();
        assert_eq!(s2.v_in.value_at(0.49), 50.0);
        assert_eq!(s2.v_in.value_at(0.55), 40.0);
        assert_eq!(s2.v_in.value_at(0.61), 50.0);
        assert_eq!(s2.v_in.value_at(1.05), 40.0);
        assert_eq!(s2.v_in.value_at(1.2), 50.0);
        assert_eq!(s2.event_times(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn zero_duration_records_initial_sample() {
        let cfg = SimConfig { duration: 0.0, ..SimConfig::default() };
        let p = PlantParams::default();
        let ts =
            run_scenario(&ScenarioSpec::scenario1(), &cfg, Controller::Gitsmbc(GitsmbcGains::default()), &p).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts.time[0], 0.0);
        assert_eq!(ts.v_dc[0], 80.0);
    }

    #[test]
    fn invalid_setup_is_reported() {
        let cfg = SimConfig { dt: 0.0, ..SimConfig::default() };
        let err = run_scenario(
            &ScenarioSpec::scenario1(),
            &cfg,
            Controller::Esmc(EsmcGains::default()),
            &PlantParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err.error, SimError::InvalidSetup(_)));
        let cfg = SimConfig { model_mode: ModelMode::Switched, dt: 5e-5, ..SimConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
