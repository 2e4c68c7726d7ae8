use approx::assert_relative_eq;

use dcmg::metrics::{
    compare_report, event_windows, lyapunov_trace, metrics_for_events, peak_slew_rate, transient_metrics, MetricsError,
};
use dcmg::sim::TimeSeries;

fn series(dt: f64, n: usize, f: impl Fn(f64) -> (f64, f64)) -> TimeSeries {
    let time: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let (v, r): (Vec<f64>, Vec<f64>) = time.iter().map(|&t| f(t)).unzip();
    TimeSeries::from_voltage(time, v, r)
}

#[test]
fn first_order_step_settling_time() {
    // 100 → 150 V with a 10 ms time constant; the 2% band around 150 V is
    // entered at tau·ln(50/3).
    let tau = 0.01;
    let ts = series(1e-5, 30_000, |t| (150.0 - 50.0 * (-t / tau).exp(), 150.0));
    let m = transient_metrics(&ts, 0.0, 0.3, 2.0).unwrap();
    assert_eq!(m.overshoot_pct, 0.0);
    assert_eq!(m.undershoot_pct, 0.0);
    assert!(m.settled);
    assert_relative_eq!(m.settling_time, tau * (50.0f64 / 3.0).ln(), epsilon = 2e-5);
    assert!(m.steady_state_error_pct < 1e-6);
}

#[test]
fn disturbance_dip_counts_as_undershoot() {
    let ts = series(1e-4, 4000, |t| {
        let v = if (0.2..0.21).contains(&t) { 140.0 } else { 150.0 };
        (v, 150.0)
    });
    let ms = metrics_for_events(&ts, &[0.0, 0.2], 2.0).unwrap();
    assert_relative_eq!(ms[1].undershoot_pct, 10.0 / 1.5, epsilon = 1e-9);
    assert_relative_eq!(ms[1].settling_time, 0.01, epsilon = 1e-9);
    assert_eq!(ms[0].settling_time, 0.0);
}

#[test]
fn windows_stop_at_next_event() {
    assert_eq!(event_windows(&[0.0, 0.125, 0.875], 1.0), vec![(0.0, 0.125), (0.125, 0.3), (0.875, 0.125)]);
}

#[test]
fn empty_window_is_an_error() {
    let ts = series(1e-3, 10, |_| (100.0, 100.0));
    assert!(matches!(transient_metrics(&ts, 5.0, 0.3, 2.0), Err(MetricsError::EmptyWindow { .. })));
}

#[test]
fn slew_rate_of_ramp() {
    let ts = series(1e-4, 2000, |t| (100.0 + 500.0 * t, 150.0));
    assert_relative_eq!(peak_slew_rate(&ts, 0.0, 0.1), 500.0, epsilon = 1e-6);
}

#[test]
fn reductions_against_self_are_zero() {
    let ts = series(1e-4, 3000, |t| (150.0 - 50.0 * (-t / 0.02).exp() * (t * 200.0).cos(), 150.0));
    let m = transient_metrics(&ts, 0.0, 0.3, 2.0).unwrap();
    let r = compare_report(&m, &m);
    assert_eq!([r.overshoot, r.undershoot, r.settling_time, r.steady_state_error], [Some(0.0); 4]);
}

#[test]
fn lyapunov_trace_flags_rise() {
    let mut ts = series(1e-4, 2000, |_| (100.0, 100.0));
    // Theta2 = ½σ² with e1 = 0: a decaying trace with a bump at 0.1 s.
    let theta = |k: usize| if (1000..1100).contains(&k) { 5.0 } else { 10.0 * (-(k as f64) / 200.0).exp() };
    ts.sigma_s = (0..2000).map(|k| (2.0 * theta(k)).sqrt()).collect();
    let rep = lyapunov_trace(&ts);
    assert_eq!(rep.violations.len(), 1);
    assert_relative_eq!(rep.violations[0].t_start, 0.1, epsilon = 2e-4);

    ts.sigma_s = (0..2000).map(|k| (20.0 * (-(k as f64) / 200.0).exp()).sqrt()).collect();
    assert!(lyapunov_trace(&ts).violations.is_empty());
}
