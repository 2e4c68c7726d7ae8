//! Transient figures of merit and the Lyapunov monitor.
//!
//! All functions work on recorded samples only; nothing is interpolated.

use serde::Serialize;
use thiserror::Error;

use crate::sim::TimeSeries;

/// Default settling band, percent of the reference.
pub const DEFAULT_BAND_PCT: f64 = 2.0;
/// Longest measurement window after an event, s.
pub const MAX_WINDOW: f64 = 0.3;

// Sample times are multiples of dt and only equal event instants up to rounding.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples in window [{start}, {end})")]
    EmptyWindow { start: f64, end: f64 },
    #[error("reference must be positive, got {0}")]
    BadReference(f64),
    #[error("window must be positive, got {0}")]
    BadWindow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransientMetrics {
    pub event_time: f64,
    pub v_ref: f64,
    pub overshoot_pct: f64,
    pub undershoot_pct: f64,
    /// Seconds from the event; equals the window when `settled` is false.
    pub settling_time: f64,
    pub settled: bool,
    pub steady_state_error_pct: f64,
}

/// How undershoot is located after an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Reference change (or start-up): undershoot counts only after the
    /// bus first reaches the new reference.
    ReferenceStep,
    /// Reference unchanged: the whole window counts.
    Disturbance,
}

fn window_range(time: &[f64], start: f64, end: f64) -> std::ops::Range<usize> {
    let lo = time.partition_point(|&t| t < start - TIME_EPS);
    let hi = time.partition_point(|&t| t < end - TIME_EPS);
    lo..hi.max(lo)
}

/// Event kind inferred from the reference column: a change of `v_ref` at the
/// event (or the first sample of the series) is a reference step.
pub fn classify_event(ts: &TimeSeries, event_time: f64) -> EventKind {
    let k = ts.time.partition_point(|&t| t < event_time - TIME_EPS);
    if k == 0 || k >= ts.len() || ts.v_ref[k - 1] != ts.v_ref[k] {
        EventKind::ReferenceStep
    } else {
        EventKind::Disturbance
    }
}

pub fn transient_metrics(
    ts: &TimeSeries,
    event_time: f64,
    window: f64,
    band_pct: f64,
) -> Result<TransientMetrics, MetricsError> {
    let kind = classify_event(ts, event_time);
    transient_metrics_with_kind(ts, event_time, window, band_pct, kind)
}

pub fn transient_metrics_with_kind(
    ts: &TimeSeries,
    event_time: f64,
    window: f64,
    band_pct: f64,
    kind: EventKind,
) -> Result<TransientMetrics, MetricsError> {
    if !(window > 0.0) {
        return Err(MetricsError::BadWindow(window));
    }
    let end = event_time + window;
    let r = window_range(&ts.time, event_time, end);
    if r.is_empty() {
        return Err(MetricsError::EmptyWindow { start: event_time, end });
    }
    let t = &ts.time[r.clone()];
    let v = &ts.v_dc[r.clone()];
    let v_ref = ts.v_ref[r.start];
    if !(v_ref > 0.0) {
        return Err(MetricsError::BadReference(v_ref));
    }

    let v_max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let overshoot_pct = (v_max - v_ref).max(0.0) / v_ref * 100.0;

    let from = match kind {
        EventKind::Disturbance => Some(0),
        EventKind::ReferenceStep => {
            let below = v[0] < v_ref;
            v.iter().position(|&x| if below { x >= v_ref } else { x <= v_ref })
        }
    };
    let undershoot_pct = from.map_or(0.0, |k| {
        let v_min = v[k..].iter().copied().fold(f64::INFINITY, f64::min);
        (v_ref - v_min).max(0.0) / v_ref * 100.0
    });

    let band = band_pct / 100.0 * v_ref;
    let last_out = v.iter().rposition(|&x| (x - v_ref).abs() > band);
    let (settling_time, settled) = match last_out {
        None => (0.0, true),
        Some(k) if k + 1 < v.len() => (t[k + 1] - event_time, true),
        Some(_) => (window, false),
    };

    let tail = (v.len() / 10).max(1);
    let mean = v[v.len() - tail..].iter().sum::<f64>() / tail as f64;
    let steady_state_error_pct = (mean - v_ref).abs() / v_ref * 100.0;

    Ok(TransientMetrics {
        event_time,
        v_ref,
        overshoot_pct,
        undershoot_pct,
        settling_time,
        settled,
        steady_state_error_pct,
    })
}

/// Measurement windows: `min(MAX_WINDOW, next event − event, end − event)`.
pub fn event_windows(events: &[f64], end_time: f64) -> Vec<(f64, f64)> {
    events
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let next = events.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let w = MAX_WINDOW.min(next - e).min(end_time - e);
            (e, w)
        })
        .filter(|&(_, w)| w > 0.0)
        .collect()
}

/// Metrics for every event, each over its own window.
pub fn metrics_for_events(
    ts: &TimeSeries,
    events: &[f64],
    band_pct: f64,
) -> Result<Vec<TransientMetrics>, MetricsError> {
    let end = ts.time.last().copied().unwrap_or(0.0);
    // The final sample sits exactly at `end`; include it in the last window.
    let end = end + ts.time.windows(2).last().map_or(0.0, |w| w[1] - w[0]);
    event_windows(events, end).into_iter().map(|(e, w)| transient_metrics(ts, e, w, band_pct)).collect()
}

/// Largest `|Δv_dc/Δt|` between consecutive samples in `[event, event + window)`.
pub fn peak_slew_rate(ts: &TimeSeries, event_time: f64, window: f64) -> f64 {
    let r = window_range(&ts.time, event_time, event_time + window);
    let (t, v) = (&ts.time[r.clone()], &ts.v_dc[r]);
    t.windows(2).zip(v.windows(2)).map(|(tw, vw)| ((vw[1] - vw[0]) / (tw[1] - tw[0])).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Lyapunov monitor

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovOptions {
    /// Samples this long after each event are not checked, s.
    pub exclusion: f64,
    /// Allowed rise above the running minimum, as a fraction of the running peak.
    pub tolerance: f64,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self { exclusion: 1e-3, tolerance: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovViolation {
    pub t_start: f64,
    pub t_end: f64,
    /// Largest rise above the running minimum inside the interval.
    pub max_rise: f64,
    pub local_peak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    pub theta2: Vec<f64>,
    pub events: Vec<f64>,
    pub checked_samples: usize,
    pub violations: Vec<LyapunovViolation>,
}

/// Instants where the reference or the supply schedule changes, plus t = 0.
pub fn detect_events(ts: &TimeSeries) -> Vec<f64> {
    let mut ev: Vec<f64> = ts.time.first().copied().into_iter().collect();
    for k in 1..ts.len() {
        if ts.v_ref[k] != ts.v_ref[k - 1] || ts.v_in[k] != ts.v_in[k - 1] {
            ev.push(ts.time[k]);
        }
    }
    ev
}

pub fn lyapunov_trace(ts: &TimeSeries) -> LyapunovReport {
    lyapunov_trace_with(ts, &LyapunovOptions::default())
}

/// `Θ₂ = ½e1² + ½σ²` per sample. Between consecutive events the trace is
/// expected to be non-increasing; a sample violates when it exceeds the
/// segment's running minimum by more than `tolerance` times the segment's
/// running peak.
pub fn lyapunov_trace_with(ts: &TimeSeries, opts: &LyapunovOptions) -> LyapunovReport {
    let theta2: Vec<f64> = ts.e1.iter().zip(&ts.sigma_s).map(|(e, s)| 0.5 * e * e + 0.5 * s * s).collect();
    let events = detect_events(ts);
    let mut violations = Vec::new();
    let mut checked = 0;

    let mut seg = 0;
    let mut run_min = f64::INFINITY;
    let mut run_peak = 0.0f64;
    let mut open: Option<LyapunovViolation> = None;
    for (&t, &th) in ts.time.iter().zip(&theta2) {
        if seg + 1 < events.len() && t >= events[seg + 1] - TIME_EPS {
            seg += 1;
            run_min = f64::INFINITY;
            run_peak = 0.0;
            violations.extend(open.take());
        }
        run_peak = run_peak.max(th);
        if t < events[seg] + opts.exclusion - TIME_EPS {
            continue;
        }
        checked += 1;
        let rise = th - run_min;
        if rise > opts.tolerance * run_peak {
            match open.as_mut() {
                Some(v) => {
                    v.t_end = t;
                    v.max_rise = v.max_rise.max(rise);
                    v.local_peak = run_peak;
                }
                None => open = Some(LyapunovViolation { t_start: t, t_end: t, max_rise: rise, local_peak: run_peak }),
            }
        } else {
            violations.extend(open.take());
        }
        run_min = run_min.min(th);
    }
    violations.extend(open);
    LyapunovReport { theta2, events, checked_samples: checked, violations }
}

// ---------------------------------------------------------------------------
// Comparison

/// Percentage reductions from a baseline `a` to a candidate `b`; `None`
/// marks a reduction that is undefined because the baseline is zero while
/// the candidate is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reduction {
    pub overshoot: Option<f64>,
    pub undershoot: Option<f64>,
    pub settling_time: Option<f64>,
    pub steady_state_error: Option<f64>,
}

pub fn reduction_pct(a: f64, b: f64) -> Option<f64> {
    if a == b {
        Some(0.0)
    } else if a == 0.0 {
        None
    } else {
        Some((a - b) / a * 100.0)
    }
}

pub fn compare_report(a: &TransientMetrics, b: &TransientMetrics) -> Reduction {
    Reduction {
        overshoot: reduction_pct(a.overshoot_pct, b.overshoot_pct),
        undershoot: reduction_pct(a.undershoot_pct, b.undershoot_pct),
        settling_time: reduction_pct(a.settling_time, b.settling_time),
        steady_state_error: reduction_pct(a.steady_state_error_pct, b.steady_state_error_pct),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn series(dt: f64, n: usize, f: impl Fn(f64) -> f64, v_ref: f64) -> TimeSeries {
        let time: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let v = time.iter().map(|&t| f(t)).collect();
        TimeSeries::from_voltage(time, v, vec![v_ref; n])
    }

    #[test]
    fn synthetic_overshoot_of_fourteen_percent() {
        // Second-order step with the peak placed at 114 V.
        let zeta = 0.530_6;
        let wn = 300.0;
        let wd = wn * (1.0f64 - zeta * zeta).sqrt();
        let mut ts = series(
            1e-5,
            30_000,
            |t| 100.0 * (1.0 - (-zeta * wn * t).exp() * ((wd * t).cos() + zeta * wn / wd * (wd * t).sin())),
            100.0,
        );
        let peak = ts.v_dc.iter().copied().fold(f64::MIN, f64::max);
        for x in &mut ts.v_dc {
            *x = 100.0 + (*x - 100.0) * 14.0 / (peak - 100.0);
        }
        let m = transient_metrics(&ts, 0.0, 0.3, 2.0).unwrap();
        assert_relative_eq!(m.overshoot_pct, 14.0, epsilon = 1e-9);
    }

    #[test]
    fn monotone_rise_has_no_overshoot_or_undershoot() {
        let ts = series(1e-4, 3000, |t| 100.0 * (1.0 - (-t / 0.01).exp()), 100.0);
        let m = transient_metrics(&ts, 0.0, 0.3, 2.0).unwrap();
        assert_eq!(m.overshoot_pct, 0.0);
        assert_eq!(m.undershoot_pct, 0.0);
        assert!(m.settled);
        assert!(m.settling_time > 0.035 && m.settling_time < 0.045);
    }

    #[test]
    fn constant_at_reference_is_all_zero() {
        let ts = series(1e-3, 500, |_| 120.0, 120.0);
        let m = transient_metrics(&ts, 0.1, 0.3, 2.0).unwrap();
        assert_eq!(
            (m.overshoot_pct, m.undershoot_pct, m.settling_time, m.steady_state_error_pct),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn unsettled_reports_window() {
        let ts = series(1e-3, 400, |t| 100.0 + 10.0 * (60.0 * t).sin(), 100.0);
        let m = transient_metrics(&ts, 0.0, 0.3, 2.0).unwrap();
        assert!(!m.settled);
        assert_eq!(m.settling_time, 0.3);
    }

    #[test]
    fn sag_undershoot_counts_whole_window() {
        let n = 1000;
        let time: Vec<f64> = (0..n).map(|k| k as f64 * 1e-3).collect();
        let v: Vec<f64> = time.iter().map(|&t| if (0.5..0.55).contains(&t) { 90.0 } else { 100.0 }).collect();
        let ts = TimeSeries::from_voltage(time, v, vec![100.0; n]);
        assert_eq!(classify_event(&ts, 0.5), EventKind::Disturbance);
        let m = transient_metrics(&ts, 0.5, 0.3, 2.0).unwrap();
        assert_relative_eq!(m.undershoot_pct, 10.0);
        assert_eq!(m.overshoot_pct, 0.0);
    }

    #[test]
    fn empty_window_is_an_error() {
        let ts = series(1e-3, 10, |_| 1.0, 1.0);
        assert!(matches!(transient_metrics(&ts, 5.0, 0.1, 2.0), Err(MetricsError::EmptyWindow { .. })));
    }

    #[test]
    fn windows_stop_at_next_event() {
        let w = event_windows(&[0.0, 0.54], 1.5);
        assert_eq!(w, vec![(0.0, 0.3), (0.54, 0.3)]);
        let w = event_windows(&[0.0, 0.5, 0.6], 0.8);
        assert_eq!(w[1].1, 0.09999999999999998f64.min(0.6 - 0.5));
        assert_relative_eq!(w[2].1, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn theta2_examples() {
        let mut ts = series(1e-3, 3, |_| 100.0, 100.0);
        assert!(lyapunov_trace(&ts).theta2.iter().all(|&x| x == 0.0));
        ts.e1[1] = 3.0;
        ts.sigma_s[1] = 4.0;
        assert_eq!(lyapunov_trace(&ts).theta2[1], 12.5);
    }

    #[test]
    fn lyapunov_flags_rise_and_skips_exclusion() {
        let mut ts = series(1e-4, 200, |_| 100.0, 100.0);
        for k in 0..200 {
            ts.e1[k] = (10.0 - 0.05 * k as f64).max(0.0);
        }
        assert!(lyapunov_trace(&ts).violations.is_empty());
        // A bump inside the first millisecond is excused, one later is not.
        ts.e1[3] = 20.0;
        assert!(lyapunov_trace(&ts).violations.is_empty());
        ts.e1[100] = 8.0;
        let rep = lyapunov_trace(&ts);
        assert_eq!(rep.violations.len(), 1);
        assert_relative_eq!(rep.violations[0].t_start, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn compare_examples() {
        let m = |os: f64, us: f64| TransientMetrics {
            event_time: 0.0,
            v_ref: 100.0,
            overshoot_pct: os,
            undershoot_pct: us,
            settling_time: 0.02,
            settled: true,
            steady_state_error_pct: 0.0,
        };
        let r = compare_report(&m(30.0, 15.0), &m(14.0, 4.0));
        assert_relative_eq!(r.overshoot.unwrap(), 53.333, epsilon = 1e-3);
        assert_relative_eq!(r.undershoot.unwrap(), 73.333, epsilon = 1e-3);
        assert_eq!(r.settling_time, Some(0.0));
        let same = compare_report(&m(30.0, 15.0), &m(30.0, 15.0));
        assert_eq!(same.overshoot, Some(0.0));
        assert_eq!(same.undershoot, Some(0.0));
        assert_eq!(compare_report(&m(0.0, 0.0), &m(1.0, 0.0)).overshoot, None);
    }

    #[test]
    fn peak_slew_of_a_ramp() {
        let ts = series(1e-3, 100, |t| 100.0 + 250.0 * t, 100.0);
        assert_relative_eq!(peak_slew_rate(&ts, 0.0, 0.05), 250.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn time_shift_invariance(shift_steps in 0usize..4096, amp in 1.0..40.0f64, tau in 0.002..0.05f64, f in 5.0..200.0f64) {
            // dt and the shift are dyadic so shifted sample times stay exact.
            let dt = 1.0 / 8192.0;
            let shift = shift_steps as f64 * dt;
            let n = 4096;
            let make = |off: f64| {
                let time: Vec<f64> = (0..n).map(|k| off + k as f64 * dt).collect();
                let v = (0..n).map(|k| { let t = k as f64 * dt; 100.0 + amp * (-t / tau).exp() * (2.0 * std::f64::consts::PI * f * t).cos() }).collect();
                TimeSeries::from_voltage(time, v, vec![100.0; n])
            };
            let a = transient_metrics_with_kind(&make(0.0), 0.0, 0.25, 2.0, EventKind::ReferenceStep).unwrap();
            let b = transient_metrics_with_kind(&make(shift), shift, 0.25, 2.0, EventKind::ReferenceStep).unwrap();
            prop_assert_eq!(a.overshoot_pct, b.overshoot_pct);
            prop_assert_eq!(a.undershoot_pct, b.undershoot_pct);
            prop_assert_eq!(a.settling_time, b.settling_time);
            prop_assert_eq!(a.steady_state_error_pct, b.steady_state_error_pct);
        }

        #[test]
        fn scale_invariance(k_exp in -4i32..=4, amp in -40.0..40.0f64, tau in 0.002..0.05f64) {
            // Power-of-two scale factors keep every ratio bit-exact.
            let k = 2f64.powi(k_exp);
            let dt = 1e-4;
            let n = 3000;
            let time: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
            let v: Vec<f64> = time.iter().map(|&t| 100.0 + amp * (-t / tau).exp() * (200.0 * t).cos()).collect();
            let a = transient_metrics(&TimeSeries::from_voltage(time.clone(), v.clone(), vec![100.0; n]), 0.0, 0.3, 2.0).unwrap();
            let vs = v.iter().map(|x| x * k).collect();
            let b = transient_metrics(&TimeSeries::from_voltage(time, vs, vec![100.0 * k; n]), 0.0, 0.3, 2.0).unwrap();
            prop_assert!((a.overshoot_pct - b.overshoot_pct).abs() < 1e-9);
            prop_assert!((a.undershoot_pct - b.undershoot_pct).abs() < 1e-9);
            prop_assert_eq!(a.settling_time, b.settling_time);
            prop_assert!((a.steady_state_error_pct - b.steady_state_error_pct).abs() < 1e-9);
        }

        #[test]
        fn metrics_are_non_negative(amp in -50.0..50.0f64, off in -20.0..20.0f64) {
            let ts = series(1e-3, 400, |t| 100.0 + off + amp * (-t / 0.02).exp() * (300.0 * t).sin(), 100.0);
            let m = transient_metrics(&ts, 0.0, 0.3, 2.0).unwrap();
            prop_assert!(m.overshoot_pct >= 0.0 && m.undershoot_pct >= 0.0 && m.settling_time >= 0.0);
        }
    }
}
