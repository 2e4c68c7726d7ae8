//! Command-line surface: config loading, the `run`, `compare`, `sweep` and
//! `validate` commands, and result files.
//!
//! Configuration is TOML. Every section is optional; omitted keys take the
//! built-in defaults and unknown keys are rejected.
//!
//! ```toml
//! [plant]                 # PlantParams
//! c_vir = 553.94e-6
//!
//! [controller]
//! kind = "gitsmbc"        # or "esmc"
//! [controller.gitsmbc]    # GitsmbcGains
//! [controller.esmc]       # EsmcGains
//!
//! [scenario]
//! preset = "scenario1"    # "scenario2" or "custom"
//! # Optional overrides; "custom" requires v_ref and v_in.
//! v_ref = [{ t = 0.0, value = 100.0 }, { t = 0.5, value = 120.0 }]
//! delay = { kind = "constant", value = 1e-3 }
//!
//! [sim]                   # SimConfig
//! initial = { kind = "precharged", v_dc = 80.0 }
//!
//! [output]
//! dir = "out"
//! plot = true
//! band_pct = 2.0
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlError, EsmcGains, GitsmbcGains};
use crate::metrics::{
    compare_report, event_windows, peak_slew_rate, transient_metrics, TransientMetrics, DEFAULT_BAND_PCT,
};
use crate::plant::{PlantError, PlantParams};
use crate::sim::{
    run_scenario, Controller, ControllerKind, ScenarioSpec, Schedule, Signal, SimAbort, SimConfig, SimError,
    TimeSeries, TIMESERIES_COLUMNS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Parse or validation failure; `line` is 1-based when known.
    #[error("{}", fmt_config_error(.path, *.line, *.column, .message))]
    Config { path: PathBuf, line: Option<usize>, column: Option<usize>, message: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("simulation aborted: {0}")]
    Aborted(String),
}

fn fmt_config_error(path: &Path, line: Option<usize>, column: Option<usize>, message: &str) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!("{}:{l}:{c}: {message}", path.display()),
        (Some(l), None) => format!("{}:{l}: {message}", path.display()),
        _ => format!("{}: {message}", path.display()),
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Aborted(_) => EXIT_ABORT,
            _ => EXIT_CONFIG,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioPreset {
    Scenario1,
    Scenario2,
    Custom,
}

impl ScenarioPreset {
    pub fn label(&self) -> &'static str {
        match self {
            ScenarioPreset::Scenario1 => "scenario1",
            ScenarioPreset::Scenario2 => "scenario2",
            ScenarioPreset::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub preset: ScenarioPreset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_ref: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_in: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed1: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed2: Option<Signal>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { preset: ScenarioPreset::Scenario1, v_ref: None, v_in: None, delay: None, ed1: None, ed2: None }
    }
}

impl ScenarioConfig {
    pub fn build(&self) -> Result<ScenarioSpec, String> {
        let base = match self.preset {
            ScenarioPreset::Scenario1 => ScenarioSpec::scenario1(),
            ScenarioPreset::Scenario2 => ScenarioSpec::scenario2(),
            ScenarioPreset::Custom => {
                if self.v_ref.is_none() || self.v_in.is_none() {
                    return Err("preset custom requires both v_ref and v_in".into());
                }
                ScenarioSpec {
                    v_ref: Schedule(vec![]),
                    v_in: Schedule(vec![]),
                    delay: Signal::Zero,
                    ed1: Signal::Zero,
                    ed2: Signal::Zero,
                }
            }
        };
        Ok(ScenarioSpec {
            v_ref: self.v_ref.clone().unwrap_or(base.v_ref),
            v_in: self.v_in.clone().unwrap_or(base.v_in),
            delay: self.delay.unwrap_or(base.delay),
            ed1: self.ed1.unwrap_or(base.ed1),
            ed2: self.ed2.unwrap_or(base.ed2),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub gitsmbc: GitsmbcGains,
    pub esmc: EsmcGains,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { kind: ControllerKind::Gitsmbc, gitsmbc: GitsmbcGains::default(), esmc: EsmcGains::default() }
    }
}

impl ControllerConfig {
    pub fn controller(&self, kind: ControllerKind) -> Controller {
        match kind {
            ControllerKind::Gitsmbc => Controller::Gitsmbc(self.gitsmbc),
            ControllerKind::Esmc => Controller::Esmc(self.esmc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plot: bool,
    /// Settling band, percent of the reference.
    pub band_pct: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), plot: true, band_pct: DEFAULT_BAND_PCT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub plant: PlantParams,
    pub controller: ControllerConfig,
    pub scenario: ScenarioConfig,
    pub sim: SimConfig,
    pub output: OutputConfig,
}

/// 1-based line and column of byte `offset` in `src`.
fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

/// Line of `key` inside table `section` (dotted, e.g. `controller.gitsmbc`),
/// or of the table header when the key is absent.
fn locate_key(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (k, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|s| s.split(']').next()) {
            current = h.trim_start_matches('[').trim().to_string();
            if current == section {
                header_line = Some(k + 1);
            }
            continue;
        }
        if current == section {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(k + 1);
                }
            }
        }
    }
    header_line
}

impl RunConfig {
    pub fn from_toml_str(src: &str, path: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map(|s| line_col(src, s.start)).unzip();
            CliError::Config { path: path.to_path_buf(), line, column, message: e.message().trim().to_string() }
        })?;
        cfg.validate().map_err(|(section, key, message)| CliError::Config {
            path: path.to_path_buf(),
            line: locate_key(src, section, key),
            column: None,
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let src = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&src, path)
    }

    /// Checks every physical and controller invariant; on failure returns
    /// the config section, the offending key and a message.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        if let Err(e) = self.plant.validate() {
            let key = match e {
                PlantError::InvalidParam { field, .. } => field,
                _ => "",
            };
            return Err(("plant", key, format!("plant.{key}: {e}")));
        }
        for (section, r) in [
            ("controller.gitsmbc", self.controller.gitsmbc.validate()),
            ("controller.esmc", self.controller.esmc.validate()),
        ] {
            if let Err(e) = r {
                let key = match e {
                    ControlError::InvalidGain { field, .. } => field,
                    _ => "",
                };
                return Err((section, key, format!("{section}.{key}: {e}")));
            }
        }
        let sim_key = |e: &SimError| -> &'static str {
            let msg = e.to_string();
            ["dt", "duration", "record_decimation", "f_switch", "v_ref", "v_in", "delay"]
                .into_iter()
                .find(|k| msg.contains(&format!(": {k} ")))
                .unwrap_or("")
        };
        if let Err(e) = self.sim.validate() {
            return Err(("sim", sim_key(&e), format!("sim: {e}")));
        }
        let spec = self.scenario.build().map_err(|m| ("scenario", "preset", format!("scenario: {m}")))?;
        if let Err(e) = spec.validate() {
            return Err(("scenario", sim_key(&e), format!("scenario: {e}")));
        }
        if !(self.output.band_pct.is_finite() && self.output.band_pct > 0.0) {
            return Err(("output", "band_pct", "output.band_pct: must be > 0".into()));
        }
        Ok(())
    }

    /// The config with scenario overrides filled in, as embedded in outputs.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        if let Ok(spec) = self.scenario.build() {
            c.scenario = ScenarioConfig {
                preset: self.scenario.preset,
                v_ref: Some(spec.v_ref),
                v_in: Some(spec.v_in),
                delay: Some(spec.delay),
                ed1: Some(spec.ed1),
                ed2: Some(spec.ed2),
            };
        }
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Command-line arguments

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Gitsmbc,
    Esmc,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::Gitsmbc => ControllerKind::Gitsmbc,
            ControllerArg::Esmc => ControllerKind::Esmc,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonOpts {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    /// Scenario preset, 1 or 2.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub scenario: Option<u8>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonOpts {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(c) = self.controller {
            cfg.controller.kind = c.into();
        }
        if let Some(s) = self.scenario {
            cfg.scenario.preset = if s == 1 { ScenarioPreset::Scenario1 } else { ScenarioPreset::Scenario2 };
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        let origin = self.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>"));
        cfg.validate().map_err(|(_, _, message)| CliError::Config {
            path: origin,
            line: None,
            column: None,
            message,
        })?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareOpts {
    #[command(flatten)]
    pub common: CommonOpts,
    #[arg(long, value_enum, default_value = "esmc")]
    pub baseline: ControllerArg,
    #[arg(long, value_enum, default_value = "gitsmbc")]
    pub candidate: ControllerArg,
}

#[derive(Debug, Clone, Args)]
pub struct SweepOpts {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Parameter to vary (see `SweepParam`).
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<f64>,
}

#[derive(Debug, Parser)]
#[command(name = "dcmg", version, about = "Closed-loop DC-microgrid boost converter workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one controller on one scenario.
    Run(CommonOpts),
    /// Simulate two controllers on one scenario and report reductions.
    Compare(CompareOpts),
    /// Repeat a run over a list of parameter values.
    Sweep(SweepOpts),
    /// Parse and validate a configuration, printing the resolved form.
    Validate(CommonOpts),
}

// ---------------------------------------------------------------------------
// Output files

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn comment_header(cfg: &RunConfig, status: &str) -> String {
    let mut h = String::new();
    writeln!(h, "# dcmg {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(h, "# status: {status}").unwrap();
    for line in cfg.resolved().to_toml().lines() {
        writeln!(h, "# {line}").unwrap();
    }
    h
}

fn write_csv(path: &Path, header: &str, columns: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |e: csv::Error| CliError::Io { path: path.to_path_buf(), source: e.into() };
        w.write_record(columns).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn write_timeseries(path: &Path, cfg: &RunConfig, status: &str, ts: &TimeSeries) -> Result<(), CliError> {
    let columns: Vec<String> = TIMESERIES_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = (0..ts.len()).map(|k| ts.row(k).as_row().iter().map(|&x| num(x)).collect()).collect();
    write_csv(path, &comment_header(cfg, status), &columns, &rows)
}

/// Metrics plus the peak bus slew rate for one event window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventReport {
    pub metrics: TransientMetrics,
    pub window: f64,
    pub peak_slew: f64,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "event_time",
    "v_ref",
    "overshoot_pct",
    "undershoot_pct",
    "settling_time_s",
    "settled",
    "steady_state_error_pct",
    "peak_slew_v_per_s",
    "window_s",
];

/// Reports for every scenario event whose window the series fully covers.
pub fn event_reports(ts: &TimeSeries, spec: &ScenarioSpec, duration: f64, band_pct: f64) -> Vec<EventReport> {
    let last = ts.time.last().copied().unwrap_or(f64::NEG_INFINITY);
    let step = ts.time.windows(2).next().map_or(0.0, |w| w[1] - w[0]);
    event_windows(&spec.event_times(), duration + step)
        .into_iter()
        .filter(|&(e, w)| e + w <= last + step + 1e-9)
        .filter_map(|(e, w)| {
            let metrics = transient_metrics(ts, e, w, band_pct).ok()?;
            Some(EventReport { metrics, window: w, peak_slew: peak_slew_rate(ts, e, w) })
        })
        .collect()
}

fn report_row(r: &EventReport) -> Vec<String> {
    let m = &r.metrics;
    vec![
        num(m.event_time),
        num(m.v_ref),
        num(m.overshoot_pct),
        num(m.undershoot_pct),
        num(m.settling_time),
        m.settled.to_string(),
        num(m.steady_state_error_pct),
        num(r.peak_slew),
        num(r.window),
    ]
}

pub fn write_metrics(path: &Path, cfg: &RunConfig, status: &str, reports: &[EventReport]) -> Result<(), CliError> {
    let columns: Vec<String> = METRICS_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = reports.iter().map(report_row).collect();
    write_csv(path, &comment_header(cfg, status), &columns, &rows)
}

/// Bus voltage of one or more runs against time, with the reference dashed.
pub fn render_svg(title: &str, traces: &[(&str, &TimeSeries)]) -> Option<String> {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let first = traces.first()?.1;
    let t_max = traces.iter().filter_map(|(_, ts)| ts.time.last().copied()).fold(0.0, f64::max);
    let (mut v_lo, mut v_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, ts) in traces {
        for &v in ts.v_dc.iter().chain(&ts.v_ref) {
            v_lo = v_lo.min(v);
            v_hi = v_hi.max(v);
        }
    }
    if !(t_max > 0.0 && v_lo.is_finite() && v_hi.is_finite()) {
        return None;
    }
    let pad = ((v_hi - v_lo) * 0.05).max(1.0);
    let (v_lo, v_hi) = (v_lo - pad, v_hi + pad);
    let x = |t: f64| M + (W - 2.0 * M) * t / t_max;
    let y = |v: f64| H - M - (H - 2.0 * M) * (v - v_lo) / (v_hi - v_lo);
    let polyline = |ts: &TimeSeries, col: &[f64]| -> String {
        let stride = (ts.len() / 4000).max(1);
        (0..ts.len())
            .step_by(stride)
            .map(|k| format!("{:.2},{:.2}", x(ts.time[k]), y(col[k])))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    )
    .ok()?;
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).ok()?;
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, W / 2.0).ok()?;
    writeln!(
        s,
        r##"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * M,
        H - 2.0 * M
    )
    .ok()?;
    for k in 0..=4 {
        let v = v_lo + (v_hi - v_lo) * k as f64 / 4.0;
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.0}</text>"#, M - 4.0, y(v) + 4.0).ok()?;
        let t = t_max * k as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{t:.3}</text>"#, x(t), H - M + 16.0).ok()?;
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">time (s)</text>"#, W / 2.0, H - 10.0).ok()?;
    writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">v_dc (V)</text>"#,
        H / 2.0,
        H / 2.0
    )
    .ok()?;
    writeln!(
        s,
        r##"<polyline fill="none" stroke="#888" stroke-dasharray="6,4" points="{}"/>"##,
        polyline(first, &first.v_ref)
    )
    .ok()?;
    for (k, (name, ts)) in traces.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.2" points="{}"/>"#, polyline(ts, &ts.v_dc))
            .ok()?;
        writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, M + 10.0, M + 16.0 + 14.0 * k as f64).ok()?;
    }
    writeln!(s, "</svg>").ok()?;
    Some(s)
}

fn write_plot(path: &Path, title: &str, traces: &[(&str, &TimeSeries)]) {
    match render_svg(title, traces) {
        Some(svg) => {
            if let Err(e) = fs::write(path, svg) {
                eprintln!("warning: plot not written ({}: {e})", path.display());
            }
        }
        None => eprintln!("warning: nothing to plot for {}", path.display()),
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Trajectory and event reports of one simulation.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub kind: ControllerKind,
    pub series: TimeSeries,
    pub reports: Vec<EventReport>,
    pub abort: Option<SimError>,
}

impl RunResult {
    pub fn status(&self) -> String {
        match &self.abort {
            None => "complete".into(),
            Some(e) => format!("aborted, partial output ({e})"),
        }
    }
}

pub fn simulate(cfg: &RunConfig, kind: ControllerKind) -> RunResult {
    let spec = cfg.scenario.build().expect("validated scenario");
    let (series, abort) = match run_scenario(&spec, &cfg.sim, cfg.controller.controller(kind), &cfg.plant) {
        Ok(ts) => (ts, None),
        Err(SimAbort { error, partial }) => (partial, Some(error)),
    };
    let reports = event_reports(&series, &spec, cfg.sim.duration, cfg.output.band_pct);
    RunResult { kind, series, reports, abort }
}

fn stem(cfg: &RunConfig, kind: ControllerKind) -> String {
    format!("{}_{}", cfg.scenario.preset.label(), kind.name())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn persist_run(cfg: &RunConfig, r: &RunResult) -> Result<Vec<PathBuf>, CliError> {
    let dir = &cfg.output.dir;
    let stem = stem(cfg, r.kind);
    let ts_path = dir.join(format!("{stem}_timeseries.csv"));
    let m_path = dir.join(format!("{stem}_metrics.csv"));
    let mut run_cfg = cfg.clone();
    run_cfg.controller.kind = r.kind;
    write_timeseries(&ts_path, &run_cfg, &r.status(), &r.series)?;
    write_metrics(&m_path, &run_cfg, &r.status(), &r.reports)?;
    let mut written = vec![ts_path, m_path];
    if cfg.output.plot {
        let p = dir.join(format!("{stem}_vdc.svg"));
        write_plot(&p, &stem, &[(r.kind.name(), &r.series)]);
        written.push(p);
    }
    Ok(written)
}

fn print_reports(name: &str, reports: &[EventReport]) {
    println!("{name}:");
    println!("  {:>8} {:>9} {:>9} {:>10} {:>8}", "event_s", "OS_%", "US_%", "ST_ms", "SSE_%");
    for r in reports {
        let m = &r.metrics;
        let st = format!("{:.2}{}", m.settling_time * 1e3, if m.settled { "" } else { "*" });
        println!(
            "  {:>8.3} {:>9.3} {:>9.3} {:>10} {:>8.3}",
            m.event_time, m.overshoot_pct, m.undershoot_pct, st, m.steady_state_error_pct
        );
    }
}

pub fn cmd_run(opts: &CommonOpts) -> Result<RunResult, CliError> {
    let cfg = opts.load()?;
    ensure_dir(&cfg.output.dir)?;
    let r = simulate(&cfg, cfg.controller.kind);
    let files = persist_run(&cfg, &r)?;
    print_reports(r.kind.name(), &r.reports);
    for f in files {
        println!("wrote {}", f.display());
    }
    match &r.abort {
        Some(e) => Err(CliError::Aborted(e.to_string())),
        None => Ok(r),
    }
}

/// One row of the side-by-side comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub event_time: f64,
    pub metric: &'static str,
    pub baseline: f64,
    pub candidate: f64,
    pub reduction_pct: Option<f64>,
}

pub fn compare_rows(baseline: &[EventReport], candidate: &[EventReport]) -> Vec<CompareRow> {
    let mut rows = Vec::new();
    for (a, b) in baseline.iter().zip(candidate) {
        let (ma, mb) = (&a.metrics, &b.metrics);
        let red = compare_report(ma, mb);
        for (metric, x, y, r) in [
            ("overshoot_pct", ma.overshoot_pct, mb.overshoot_pct, red.overshoot),
            ("undershoot_pct", ma.undershoot_pct, mb.undershoot_pct, red.undershoot),
            ("settling_time_s", ma.settling_time, mb.settling_time, red.settling_time),
            ("steady_state_error_pct", ma.steady_state_error_pct, mb.steady_state_error_pct, red.steady_state_error),
        ] {
            rows.push(CompareRow { event_time: ma.event_time, metric, baseline: x, candidate: y, reduction_pct: r });
        }
    }
    rows
}

pub struct CompareResult {
    pub baseline: RunResult,
    pub candidate: RunResult,
    pub rows: Vec<CompareRow>,
}

pub fn cmd_compare(opts: &CompareOpts) -> Result<CompareResult, CliError> {
    let cfg = opts.common.load()?;
    ensure_dir(&cfg.output.dir)?;
    let (bk, ck): (ControllerKind, ControllerKind) = (opts.baseline.into(), opts.candidate.into());
    let (baseline, candidate) = rayon::join(|| simulate(&cfg, bk), || simulate(&cfg, ck));
    let mut files = persist_run(&cfg, &baseline)?;
    if ck != bk {
        files.extend(persist_run(&cfg, &candidate)?);
    }

    let rows = compare_rows(&baseline.reports, &candidate.reports);
    let label = cfg.scenario.preset.label();
    let path = cfg.output.dir.join(format!("{label}_compare.csv"));
    let columns: Vec<String> =
        ["event_time", "metric", bk.name(), ck.name(), "reduction_pct"].iter().map(|s| s.to_string()).collect();
    // Same controller in both slots would give duplicate column names.
    let columns: Vec<String> = if bk == ck {
        vec!["event_time".into(), "metric".into(), "baseline".into(), "candidate".into(), "reduction_pct".into()]
    } else {
        columns
    };
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.event_time),
                r.metric.to_string(),
                num(r.baseline),
                num(r.candidate),
                r.reduction_pct.map_or("undefined".into(), num),
            ]
        })
        .collect();
    let status = match (&baseline.abort, &candidate.abort) {
        (None, None) => "complete".to_string(),
        _ => format!("{}: {}; {}: {}", bk.name(), baseline.status(), ck.name(), candidate.status()),
    };
    write_csv(&path, &comment_header(&cfg, &status), &columns, &body)?;
    files.push(path);
    if cfg.output.plot {
        let p = cfg.output.dir.join(format!("{label}_compare_vdc.svg"));
        write_plot(&p, label, &[(bk.name(), &baseline.series), (ck.name(), &candidate.series)]);
        files.push(p);
    }

    print_reports(bk.name(), &baseline.reports);
    print_reports(ck.name(), &candidate.reports);
    println!("reduction {} -> {} (%):", bk.name(), ck.name());
    for r in &rows {
        let red = r.reduction_pct.map_or("undefined".to_string(), |x| format!("{x:.1}"));
        println!("  t={:<6} {:<24} {red}", r.event_time, r.metric);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    if let Some(e) = baseline.abort.as_ref().or(candidate.abort.as_ref()) {
        return Err(CliError::Aborted(e.to_string()));
    }
    Ok(CompareResult { baseline, candidate, rows })
}

/// Keys accepted by `sweep --param`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Virtual capacitance in farads.
    CVir,
    /// Virtual capacitance as a multiple of `c_dc`.
    CVirRatio,
    CDc,
    LInd,
    PCpl,
    Beta1,
    Beta2,
    Beta3,
    KappaA,
    KappaB,
    Chi,
    PowerBase,
    BoundaryLayer,
    EsmcLambda,
    EsmcEta,
}

impl SweepParam {
    pub const ALL: [(&'static str, SweepParam); 15] = [
        ("c_vir", SweepParam::CVir),
        ("c_vir_ratio", SweepParam::CVirRatio),
        ("c_dc", SweepParam::CDc),
        ("l_ind", SweepParam::LInd),
        ("p_cpl", SweepParam::PCpl),
        ("beta1", SweepParam::Beta1),
        ("beta2", SweepParam::Beta2),
        ("beta3", SweepParam::Beta3),
        ("kappa_a", SweepParam::KappaA),
        ("kappa_b", SweepParam::KappaB),
        ("chi", SweepParam::Chi),
        ("power_base", SweepParam::PowerBase),
        ("boundary_layer", SweepParam::BoundaryLayer),
        ("esmc_lambda", SweepParam::EsmcLambda),
        ("esmc_eta", SweepParam::EsmcEta),
    ];

    pub fn name(&self) -> &'static str {
        Self::ALL.iter().find(|(_, p)| p == self).map(|(n, _)| *n).unwrap_or("?")
    }

    pub fn apply(&self, cfg: &mut RunConfig, value: f64) {
        let g = &mut cfg.controller.gitsmbc;
        match self {
            SweepParam::CVir => cfg.plant.c_vir = value,
            SweepParam::CVirRatio => cfg.plant.c_vir = value * cfg.plant.c_dc,
            SweepParam::CDc => cfg.plant.c_dc = value,
            SweepParam::LInd => cfg.plant.l_ind = value,
            SweepParam::PCpl => cfg.plant.p_cpl = value,
            SweepParam::Beta1 => g.beta1 = value,
            SweepParam::Beta2 => g.beta2 = value,
            SweepParam::Beta3 => g.beta3 = value,
            SweepParam::KappaA => g.kappa_a = value,
            SweepParam::KappaB => g.kappa_b = value,
            SweepParam::Chi => g.chi = value,
            SweepParam::PowerBase => g.power_base = value,
            SweepParam::BoundaryLayer => g.boundary_layer = value,
            SweepParam::EsmcLambda => cfg.controller.esmc.lambda = value,
            SweepParam::EsmcEta => cfg.controller.esmc.eta = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Self::ALL.iter().find(|(n, _)| *n == s).map(|(_, p)| *p).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|(n, _)| *n).collect();
            CliError::Usage(format!("unknown sweep parameter `{s}`; expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub result: RunResult,
}

pub fn cmd_sweep(opts: &SweepOpts) -> Result<Vec<SweepPoint>, CliError> {
    let param: SweepParam = opts.param.parse()?;
    if opts.values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let base = opts.common.load()?;
    let origin = opts.common.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>"));
    let configs: Vec<RunConfig> = opts
        .values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            param.apply(&mut c, v);
            c.validate().map(|_| c).map_err(|(_, _, m)| CliError::Config {
                path: origin.clone(),
                line: None,
                column: None,
                message: format!("{} = {v}: {m}", param.name()),
            })
        })
        .collect::<Result<_, _>>()?;
    ensure_dir(&base.output.dir)?;

    let kind = base.controller.kind;
    let points: Vec<SweepPoint> = configs
        .par_iter()
        .zip(&opts.values)
        .map(|(c, &value)| SweepPoint { value, result: simulate(c, kind) })
        .collect();

    let spec = base.scenario.build().expect("validated scenario");
    let events = spec.event_times();
    let mut columns = vec!["param".to_string(), "value".to_string(), "status".to_string()];
    for e in &events {
        for m in [
            "overshoot_pct",
            "undershoot_pct",
            "settling_time_s",
            "settled",
            "steady_state_error_pct",
            "peak_slew_v_per_s",
        ] {
            columns.push(format!("t{e}_{m}"));
        }
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut row = vec![param.name().to_string(), num(p.value), p.result.status()];
            for e in &events {
                match p.result.reports.iter().find(|r| r.metrics.event_time == *e) {
                    Some(r) => row.extend(report_row(r)[2..8].iter().cloned()),
                    None => row.extend(std::iter::repeat_n(String::new(), 6)),
                }
            }
            row
        })
        .collect();
    let path =
        base.output.dir.join(format!("{}_{}_sweep_{}.csv", base.scenario.preset.label(), kind.name(), param.name()));
    let status = if points.iter().all(|p| p.result.abort.is_none()) { "complete" } else { "some points aborted" };
    write_csv(&path, &comment_header(&base, status), &columns, &rows)?;

    for p in &points {
        print!("{} = {}:", param.name(), p.value);
        for r in &p.result.reports {
            print!(
                " [t={} OS {:.2}% US {:.2}% ST {:.1} ms slew {:.0} V/s]",
                r.metrics.event_time,
                r.metrics.overshoot_pct,
                r.metrics.undershoot_pct,
                r.metrics.settling_time * 1e3,
                r.peak_slew
            );
        }
        if let Some(e) = &p.result.abort {
            print!(" aborted: {e}");
        }
        println!();
    }
    println!("wrote {}", path.display());
    if let Some(p) = points.iter().find(|p| p.result.abort.is_some()) {
        return Err(CliError::Aborted(format!("{} = {}: {}", param.name(), p.value, p.result.status())));
    }
    Ok(points)
}

pub fn cmd_validate(opts: &CommonOpts) -> Result<RunConfig, CliError> {
    let cfg = opts.load()?;
    print!("{}", cfg.resolved().to_toml());
    Ok(cfg)
}

/// Binary entry point; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Run(o) => cmd_run(o).map(|_| ()),
        Command::Compare(o) => cmd_compare(o).map(|_| ()),
        Command::Sweep(o) => cmd_sweep(o).map(|_| ()),
        Command::Validate(o) => cmd_validate(o).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
