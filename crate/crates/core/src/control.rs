//! Duty-ratio controllers.
//!
//! [`gitsmbc_step`] is the composite backstepping / global integral terminal
//! sliding-mode law acting on the energy coordinates of
//! [`crate::transform`]. [`esmc_step`] is a conventional voltage-mode sliding
//! mode controller used as the comparison baseline.
//!
//! The composite law runs on energy coordinates divided by
//! [`GitsmbcGains::power_base`]: `e1/P_b`, `e2/P_b`, `∫e2/P_b`. The gains are
//! therefore per-unit quantities. Diagnostics are reported back in SI.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::PlantState;
use crate::transform::{CanonicalState, LinearizationCoeffs, ReferenceFrame, DEFAULT_B_MIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("linearization is singular: b(x) = {b_x}")]
    Singular { b_x: f64 },
    #[error("controller produced a non-finite {0}")]
    Fault(&'static str),
    #[error("invalid controller gain `{field}`: {reason}")]
    InvalidGain { field: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GitsmbcGains {
    /// Backstepping gain on the energy error.
    pub beta1: f64,
    /// Constant-rate reaching gain.
    pub beta2: f64,
    /// Fractional-power reaching gain.
    pub beta3: f64,
    pub beta_ub1: f64,
    pub beta_ub2: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    /// Surface exponent is `exp_x / exp_y`.
    pub exp_x: u32,
    pub exp_y: u32,
    pub chi: f64,
    /// Width of the saturated-ramp sign function, 0 for a pure sign.
    pub boundary_layer: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Power used to normalize the energy coordinates, W.
    pub power_base: f64,
    /// Floor on the normalized `|∫e2|` inside `|∫e2|^ψ` when `ψ < 0`.
    pub integral_floor: f64,
}

impl Default for GitsmbcGains {
    fn default() -> Self {
        Self {
            beta1: 2000.0,
            beta2: 50.0,
            beta3: 5.0,
            beta_ub1: 1.0,
            beta_ub2: 1.0,
            kappa_a: 0.2,
            kappa_b: 0.1,
            exp_x: 3,
            exp_y: 5,
            chi: 0.6,
            boundary_layer: 0.01,
            mu_min: 0.0,
            mu_max: 0.95,
            power_base: 2800.0,
            integral_floor: 1e-6,
        }
    }
}

impl GitsmbcGains {
    pub fn surface_exponent(&self) -> f64 {
        f64::from(self.exp_x) / f64::from(self.exp_y)
    }

    pub fn psi(&self) -> f64 {
        self.surface_exponent() - 1.0
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = [
            (self.beta1, "beta1"),
            (self.beta2, "beta2"),
            (self.beta3, "beta3"),
            (self.kappa_a, "kappa_a"),
            (self.kappa_b, "kappa_b"),
            (self.power_base, "power_base"),
            (self.integral_floor, "integral_floor"),
        ];
        for (v, field) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ControlError::InvalidGain { field, reason: "must be > 0" });
            }
        }
        for (v, field) in
            [(self.beta_ub1, "beta_ub1"), (self.beta_ub2, "beta_ub2"), (self.boundary_layer, "boundary_layer")]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ControlError::InvalidGain { field, reason: "must be >= 0" });
            }
        }
        if self.exp_x == 0 || self.exp_y == 0 {
            return Err(ControlError::InvalidGain { field: "exp_x", reason: "exponents must be positive integers" });
        }
        if !(self.chi > 0.0 && self.chi < 1.0) {
            return Err(ControlError::InvalidGain { field: "chi", reason: "must lie in (0, 1)" });
        }
        validate_duty_limits(self.mu_min, self.mu_max)
    }
}

fn validate_duty_limits(mu_min: f64, mu_max: f64) -> Result<(), ControlError> {
    if !(0.0 <= mu_min && mu_min < mu_max && mu_max <= 1.0) {
        return Err(ControlError::InvalidGain { field: "mu_max", reason: "need 0 <= mu_min < mu_max <= 1" });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerState {
    /// Running integral of `e2`, W·s.
    pub int_e2: f64,
    pub last_mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GitsmbcDiagnostics {
    /// J
    pub e1: f64,
    /// W
    pub e2: f64,
    /// Sliding variable scaled back to W.
    pub sigma_s: f64,
    /// `½e1² + ½σ²` in the same scaling.
    pub theta2: f64,
    /// Duty before saturation.
    pub mu_raw: f64,
}

/// Defaults are the gain-grid point with the shortest combined settling
/// time over the start-up and reference-step transients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsmcGains {
    /// Surface slope, 1/s.
    pub lambda: f64,
    /// Switching amplitude in duty units.
    pub eta: f64,
    /// Boundary layer on the surface, V/s.
    pub boundary_layer: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Time constant of the first-order filter on the voltage derivative, s.
    pub derivative_filter_tc: f64,
}

impl Default for EsmcGains {
    fn default() -> Self {
        Self { lambda: 40.0, eta: 0.03, boundary_layer: 2000.0, mu_min: 0.0, mu_max: 0.95, derivative_filter_tc: 2e-4 }
    }
}

impl EsmcGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        for (v, field) in [
            (self.lambda, "lambda"),
            (self.eta, "eta"),
            (self.boundary_layer, "boundary_layer"),
            (self.derivative_filter_tc, "derivative_filter_tc"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ControlError::InvalidGain { field, reason: "must be >= 0" });
            }
        }
        validate_duty_limits(self.mu_min, self.mu_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EsmcState {
    pub prev_v_dc: Option<f64>,
    /// Filtered `dv_dc/dt`, V/s.
    pub dv_filtered: f64,
    pub last_mu: f64,
}

/// `sgn(u)·|u|^p`, the odd real extension of a fractional power.
pub fn signed_fractional_power(u: f64, p: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u.signum() * u.abs().powf(p)
    }
}

/// Sign function, softened to a saturated ramp of half-width `layer`.
pub fn smooth_sgn(s: f64, layer: f64) -> f64 {
    if layer > 0.0 {
        (s / layer).clamp(-1.0, 1.0)
    } else if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn backstepping_virtual_control(e1: f64, zeta1_ref_dot: f64, beta1: f64) -> f64 {
    -beta1 * e1 + zeta1_ref_dot
}

pub fn sliding_surface(e2: f64, int_e2: f64, gains: &GitsmbcGains) -> f64 {
    e2 + gains.kappa_a * int_e2 + gains.kappa_b * signed_fractional_power(int_e2, gains.surface_exponent())
}

/// Reaching law `σ' = -β2·sgn(σ) - β3·|σ|^χ·sgn(σ)`.
pub fn ifprl_rate(sigma: f64, gains: &GitsmbcGains) -> f64 {
    let sg = smooth_sgn(sigma, gains.boundary_layer);
    -gains.beta2 * sg - gains.beta3 * sigma.abs().powf(gains.chi) * sg
}

/// Closed-form reaching time of the fractional-power term alone.
pub fn analytic_convergence_time(sigma0: f64, beta3: f64, chi: f64) -> f64 {
    sigma0.abs().powf(1.0 - chi) / (beta3 * (1.0 - chi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GitsmbcOutput {
    pub mu: f64,
    pub state: ControllerState,
    pub diagnostics: GitsmbcDiagnostics,
}

/// One control period of the composite law.
///
/// The integral of `e2` only advances when the raw duty lies inside the
/// duty limits (conditional-integration anti-windup).
pub fn gitsmbc_step(
    canon: CanonicalState,
    refs: &ReferenceFrame,
    coeffs: LinearizationCoeffs,
    cstate: ControllerState,
    gains: &GitsmbcGains,
    dt: f64,
) -> Result<GitsmbcOutput, ControlError> {
    if !(coeffs.b_x > DEFAULT_B_MIN) {
        return Err(ControlError::Singular { b_x: coeffs.b_x });
    }
    let pb = gains.power_base;

    let e1 = (canon.zeta1 - refs.zeta1_ref) / pb;
    let zeta2 = canon.zeta2 / pb;
    let ref_dot = refs.zeta1_ref_dot / pb;
    let ref_ddot = refs.zeta1_ref_ddot / pb;
    let a = coeffs.a_x / pb;
    let b = coeffs.b_x / pb;
    let integral = cstate.int_e2 / pb;

    let lambda = backstepping_virtual_control(e1, ref_dot, gains.beta1);
    let e2 = zeta2 - lambda;
    let tau = -gains.beta1 * (zeta2 - ref_dot) + ref_ddot;
    let sigma = sliding_surface(e2, integral, gains);

    let psi = gains.psi();
    let integral_mag = if psi < 0.0 { integral.abs().max(gains.integral_floor) } else { integral.abs() };
    let sg = smooth_sgn(sigma, gains.boundary_layer);
    let bracket = a - tau
        + gains.kappa_a * e2
        + gains.kappa_b * (1.0 + psi) * e2 * integral_mag.powf(psi)
        + (gains.beta2 + gains.beta_ub1 + gains.beta_ub2) * sg
        + gains.beta3 * sigma.abs().powf(gains.chi) * sg;
    let mu_raw = -bracket / b;
    if !mu_raw.is_finite() {
        return Err(ControlError::Fault("duty ratio"));
    }
    let mu = mu_raw.clamp(gains.mu_min, gains.mu_max);

    let mut int_e2 = cstate.int_e2;
    if mu == mu_raw {
        int_e2 += e2 * pb * dt;
    }
    if !int_e2.is_finite() {
        return Err(ControlError::Fault("integral state"));
    }

    let e1_si = e1 * pb;
    let sigma_si = sigma * pb;
    Ok(GitsmbcOutput {
        mu,
        state: ControllerState { int_e2, last_mu: mu },
        diagnostics: GitsmbcDiagnostics {
            e1: e1_si,
            e2: e2 * pb,
            sigma_s: sigma_si,
            theta2: 0.5 * e1_si * e1_si + 0.5 * sigma_si * sigma_si,
            mu_raw,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsmcOutput {
    pub mu: f64,
    pub state: EsmcState,
    /// Sliding variable, V/s.
    pub surface: f64,
}

/// Conventional voltage-mode sliding-mode controller.
///
/// Surface `s = λ·(v_ref − v) + d/dt(v_ref − v)` with the derivative taken
/// from a filtered finite difference; duty is the boost equivalent duty
/// `1 − v_in/v_dc` plus `η·sgn(s)` (smoothed), clamped to the limits.
pub fn esmc_step(
    plant: PlantState,
    refs: &ReferenceFrame,
    v_in: f64,
    gains: &EsmcGains,
    state: EsmcState,
    dt: f64,
) -> Result<EsmcOutput, ControlError> {
    let v = plant.v_dc;
    let dv_filtered = match state.prev_v_dc {
        None => 0.0,
        Some(prev) => {
            let raw = (v - prev) / dt;
            let alpha = if gains.derivative_filter_tc > 0.0 { dt / (gains.derivative_filter_tc + dt) } else { 1.0 };
            state.dv_filtered + alpha * (raw - state.dv_filtered)
        }
    };
    // reference is piecewise constant, so d/dt(v_ref − v) = −dv/dt
    let s = gains.lambda * (refs.v_dc_ref - v) - dv_filtered;
    let mu_eq = 1.0 - v_in / v.max(f64::MIN_POSITIVE);
    let mu_raw = mu_eq + gains.eta * smooth_sgn(s, gains.boundary_layer);
    if !mu_raw.is_finite() {
        return Err(ControlError::Fault("duty ratio"));
    }
    let mu = mu_raw.clamp(gains.mu_min, gains.mu_max);
    Ok(EsmcOutput { mu, state: EsmcState { prev_v_dc: Some(v), dv_filtered, last_mu: mu }, surface: s })
}
