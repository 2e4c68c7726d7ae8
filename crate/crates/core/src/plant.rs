//! Averaged model of the boost converter feeding a DC bus that carries a
//! constant-power load (CPL), an optional resistive load and a virtual
//! capacitor in parallel with the physical bus capacitance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("incremental impedance undefined for zero load power")]
    UndefinedImpedance,
    #[error("bus voltage collapsed to {v_dc} V with the constant-power load active")]
    Collapse { v_dc: f64 },
    #[error("invalid plant parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: &'static str },
}

/// Physical constants of the test system.
///
/// `r_load = None` means the resistive (constant-voltage) load is absent,
/// i.e. infinite resistance; every `1/r_load` term is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub v_in_nominal: f64,
    pub p_cpl: f64,
    pub r_series: f64,
    pub l_ind: f64,
    pub c_dc: f64,
    pub c_vir: f64,
    pub r_load: Option<f64>,
    pub v_cpl_min: f64,
    pub use_r_series: bool,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            v_in_nominal: 50.0,
            p_cpl: 2800.0,
            r_series: 0.07,
            l_ind: 10.5e-3,
            c_dc: 553.94e-6,
            c_vir: 553.94e-6,
            r_load: None,
            v_cpl_min: 5.0,
            use_r_series: false,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let checks: [(bool, &'static str, &'static str); 8] = [
            (self.v_in_nominal.is_finite() && self.v_in_nominal > 0.0, "v_in_nominal", "must be > 0"),
            (self.p_cpl.is_finite() && self.p_cpl >= 0.0, "p_cpl", "must be >= 0"),
            (self.r_series.is_finite() && self.r_series >= 0.0, "r_series", "must be >= 0"),
            (self.l_ind.is_finite() && self.l_ind > 0.0, "l_ind", "must be > 0"),
            (self.c_dc.is_finite() && self.c_dc > 0.0, "c_dc", "must be > 0"),
            (self.c_vir.is_finite() && self.c_vir >= 0.0, "c_vir", "must be >= 0"),
            (self.r_load.is_none_or(|r| r.is_finite() && r > 0.0), "r_load", "must be > 0 when present"),
            (self.v_cpl_min.is_finite() && self.v_cpl_min > 0.0, "v_cpl_min", "must be > 0"),
        ];
        for (ok, field, reason) in checks {
            if !ok {
                return Err(PlantError::InvalidParam { field, reason });
            }
        }
        Ok(())
    }

    pub fn c_eff(&self) -> f64 {
        self.c_dc + self.c_vir
    }

    /// Conductance of the resistive load, zero when it is absent.
    pub fn g_load(&self) -> f64 {
        self.r_load.map_or(0.0, |r| 1.0 / r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantState {
    pub i_l: f64,
    pub v_dc: f64,
}

impl PlantState {
    pub fn new(i_l: f64, v_dc: f64) -> Self {
        Self { i_l, v_dc }
    }

    pub fn is_finite(&self) -> bool {
        self.i_l.is_finite() && self.v_dc.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantDerivative {
    pub di_l_dt: f64,
    pub dv_dc_dt: f64,
}

/// Current drawn by the CPL. Below `v_cpl_min` the load is evaluated at
/// `v_cpl_min` and therefore behaves as a constant-current sink.
pub fn cpl_current(p_cpl: f64, v_dc: f64, v_cpl_min: f64) -> Result<f64, PlantError> {
    if !(p_cpl.is_finite() && v_dc.is_finite() && v_cpl_min.is_finite()) {
        return Err(PlantError::InvalidInput("cpl_current requires finite inputs"));
    }
    if p_cpl < 0.0 || v_cpl_min <= 0.0 {
        return Err(PlantError::InvalidInput("cpl_current requires p_cpl >= 0 and v_cpl_min > 0"));
    }
    Ok(p_cpl / v_dc.max(v_cpl_min))
}

/// Small-signal (negative incremental) impedance of the CPL, `-v²/P`.
pub fn nii_impedance(p_cpl: f64, v_dc: f64) -> Result<f64, PlantError> {
    if p_cpl == 0.0 {
        return Err(PlantError::UndefinedImpedance);
    }
    if !(p_cpl.is_finite() && v_dc.is_finite()) || p_cpl < 0.0 || v_dc <= 0.0 {
        return Err(PlantError::InvalidInput("nii_impedance requires p_cpl > 0 and v_dc > 0"));
    }
    Ok(-v_dc * v_dc / p_cpl)
}

pub fn effective_capacitance(c_dc: f64, c_vir: f64) -> Result<f64, PlantError> {
    if !(c_dc.is_finite() && c_vir.is_finite()) || c_dc <= 0.0 || c_vir < 0.0 {
        return Err(PlantError::InvalidInput("effective_capacitance requires c_dc > 0 and c_vir >= 0"));
    }
    Ok(c_dc + c_vir)
}

/// Transient compensation power of the virtual capacitor.
pub fn virtual_power(v_dc: f64, dv_dc_dt: f64, c_vir: f64) -> Result<f64, PlantError> {
    let p = v_dc * c_vir * dv_dc_dt;
    if p.is_finite() {
        Ok(p)
    } else {
        Err(PlantError::InvalidInput("virtual_power requires finite inputs"))
    }
}

/// Right-hand side of the averaged converter dynamics.
///
/// `delta_p_vir` is the virtual-capacitor power injected on the bus. The
/// caller decides how it is sourced (see `sim::VirtualCapMode`); passing
/// zero gives the bus an effective capacitance of `c_dc + c_vir`.
pub fn plant_derivatives(
    state: PlantState,
    mu: f64,
    v_in: f64,
    delta_p_vir: f64,
    params: &PlantParams,
) -> Result<PlantDerivative, PlantError> {
    let PlantState { i_l, v_dc } = state;
    if !(state.is_finite() && mu.is_finite() && v_in.is_finite() && delta_p_vir.is_finite()) {
        return Err(PlantError::InvalidInput("plant_derivatives requires finite inputs"));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(PlantError::InvalidInput("duty ratio outside [0, 1]"));
    }
    let cpl_active = params.p_cpl > 0.0;
    if cpl_active && v_dc <= 0.0 {
        return Err(PlantError::Collapse { v_dc });
    }

    let l = params.l_ind;
    let c_eff = params.c_eff();

    let mut di = (v_in - v_dc) / l + (v_dc / l) * mu;
    if params.use_r_series {
        di -= params.r_series / l * i_l;
    }

    // Power terms are divided by the bus voltage; with neither CPL nor
    // virtual power present a dead bus (v_dc = 0) stays well defined.
    let per_volt = if v_dc.abs() > 0.0 { delta_p_vir / v_dc } else { 0.0 };
    let i_cpl = if cpl_active { cpl_current(params.p_cpl, v_dc, params.v_cpl_min)? } else { 0.0 };
    let dv = (i_l - v_dc * params.g_load() + per_volt - i_cpl) / c_eff - (i_l / c_eff) * mu;

    Ok(PlantDerivative { di_l_dt: di, dv_dc_dt: dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table_params() -> PlantParams {
        PlantParams { c_vir: 0.0, ..PlantParams::default() }
    }

    #[test]
    fn cpl_current_examples() {
        assert_relative_eq!(cpl_current(2800.0, 100.0, 5.0).unwrap(), 28.0);
        assert_eq!(cpl_current(0.0, 73.0, 5.0).unwrap(), 0.0);
        assert_relative_eq!(cpl_current(2800.0, 50.0, 5.0).unwrap(), 56.0);
        // undervoltage guard degrades to constant current
        assert_relative_eq!(cpl_current(2800.0, 1.0, 5.0).unwrap(), 560.0);
        assert!(matches!(cpl_current(f64::NAN, 1.0, 5.0), Err(PlantError::InvalidInput(_))));
    }

    #[test]
    fn nii_examples() {
        assert_relative_eq!(nii_impedance(2800.0, 100.0).unwrap(), -3.5714, epsilon = 1e-4);
        assert_relative_eq!(nii_impedance(1.0, 1.0).unwrap(), -1.0);
        assert_relative_eq!(nii_impedance(2800.0, 200.0).unwrap(), -14.2857, epsilon = 1e-4);
        assert_eq!(nii_impedance(0.0, 100.0), Err(PlantError::UndefinedImpedance));
    }

    #[test]
    fn effective_capacitance_examples() {
        assert_relative_eq!(effective_capacitance(553.94e-6, 0.0).unwrap(), 553.94e-6);
        assert_relative_eq!(effective_capacitance(553.94e-6, 553.94e-6).unwrap(), 1107.88e-6);
        assert_relative_eq!(effective_capacitance(1e-3, 2e-3).unwrap(), 3e-3);
        assert!(effective_capacitance(1e-3, -1e-6).is_err());
        assert!(effective_capacitance(-1e-3, 0.0).is_err());
    }

    #[test]
    fn virtual_power_examples() {
        assert_relative_eq!(virtual_power(100.0, -10.0, 1e-3).unwrap(), -1.0);
        assert_eq!(virtual_power(42.0, 0.0, 7e-3).unwrap(), 0.0);
        assert_relative_eq!(virtual_power(100.0, 10.0, 1e-3).unwrap(), 1.0);
        assert!(virtual_power(f64::INFINITY, 1.0, 1.0).is_err());
    }

    #[test]
    fn equilibrium_derivatives_vanish() {
        let mut p = table_params();
        p.p_cpl = 2800.0;
        let d = plant_derivatives(PlantState::new(56.0, 100.0), 0.5, 50.0, 0.0, &p).unwrap();
        assert_relative_eq!(d.di_l_dt, 0.0, epsilon = 1e-9);
        assert_relative_eq!(d.dv_dc_dt, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn dead_circuit_is_at_rest() {
        let p = PlantParams { p_cpl: 0.0, ..table_params() };
        let d = plant_derivatives(PlantState::new(0.0, 0.0), 0.0, 0.0, 0.0, &p).unwrap();
        assert_eq!(d.di_l_dt, 0.0);
        assert_eq!(d.dv_dc_dt, 0.0);
    }

    #[test]
    fn collapse_and_bad_duty_are_errors() {
        let p = table_params();
        assert!(matches!(
            plant_derivatives(PlantState::new(10.0, 0.0), 0.3, 50.0, 0.0, &p),
            Err(PlantError::Collapse { .. })
        ));
        assert!(plant_derivatives(PlantState::new(10.0, 80.0), 1.2, 50.0, 0.0, &p).is_err());
    }

    #[test]
    fn series_resistance_only_when_enabled() {
        let off = table_params();
        let on = PlantParams { use_r_series: true, ..off };
        let s = PlantState::new(56.0, 100.0);
        let d_off = plant_derivatives(s, 0.5, 50.0, 0.0, &off).unwrap();
        let d_on = plant_derivatives(s, 0.5, 50.0, 0.0, &on).unwrap();
        assert_relative_eq!(d_off.di_l_dt - d_on.di_l_dt, 0.07 / 10.5e-3 * 56.0, max_relative = 1e-12);
        assert_eq!(d_off.dv_dc_dt, d_on.dv_dc_dt);
    }

    #[test]
    fn validation_names_field() {
        let p = PlantParams { l_ind: -1.0, ..PlantParams::default() };
        assert_eq!(p.validate(), Err(PlantError::InvalidParam { field: "l_ind", reason: "must be > 0" }));
        let p = PlantParams { r_load: Some(0.0), ..PlantParams::default() };
        assert!(p.validate().is_err());
        assert!(PlantParams::default().validate().is_ok());
    }

    fn arb_state() -> impl Strategy<Value = (f64, f64, f64, f64)> {
        // (i_l, v_dc, mu, v_in)
        (0.0..150.0f64, 20.0..200.0f64, 0.0..=1.0f64, 30.0..60.0f64)
    }

    proptest! {
        #[test]
        fn doubling_c_eff_halves_bus_slew((i, v, mu, vin) in arb_state()) {
            let p1 = table_params();
            let p2 = PlantParams { c_dc: 2.0 * p1.c_dc, ..p1 };
            let s = PlantState::new(i, v);
            let d1 = plant_derivatives(s, mu, vin, 0.0, &p1).unwrap();
            let d2 = plant_derivatives(s, mu, vin, 0.0, &p2).unwrap();
            if d2.dv_dc_dt != 0.0 {
                let ratio = d1.dv_dc_dt / d2.dv_dc_dt;
                prop_assert!((ratio - 2.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn nii_times_cpl_current_is_minus_v(p in 1.0..5000.0f64, v in 5.0..500.0f64) {
            let z = nii_impedance(p, v).unwrap();
            let i = cpl_current(p, v, 5.0).unwrap();
            prop_assert!((z * i + v).abs() <= 1e-9 * v);
        }

        #[test]
        fn derivatives_affine_in_duty((i, v, mu, vin) in arb_state()) {
            let p = PlantParams { r_load: Some(40.0), use_r_series: true, ..table_params() };
            let s = PlantState::new(i, v);
            let d0 = plant_derivatives(s, 0.0, vin, 3.0, &p).unwrap();
            let d1 = plant_derivatives(s, 1.0, vin, 3.0, &p).unwrap();
            let dm = plant_derivatives(s, mu, vin, 3.0, &p).unwrap();
            let li = d0.di_l_dt + mu * (d1.di_l_dt - d0.di_l_dt);
            let lv = d0.dv_dc_dt + mu * (d1.dv_dc_dt - d0.dv_dc_dt);
            prop_assert!((dm.di_l_dt - li).abs() <= 1e-9 * (1.0 + li.abs()));
            prop_assert!((dm.dv_dc_dt - lv).abs() <= 1e-9 * (1.0 + lv.abs()));
        }

        #[test]
        fn stored_energy_rate_matches_port_powers(
            (i, v, mu, vin) in arb_state(),
            r in 10.0..500.0f64,
            dp in -200.0..200.0f64,
        ) {
            let p = PlantParams { r_load: Some(r), ..table_params() };
            let d = plant_derivatives(PlantState::new(i, v), mu, vin, dp, &p).unwrap();
            let de = p.l_ind * i * d.di_l_dt + p.c_eff() * v * d.dv_dc_dt;
            let expected = vin * i - v * v / r + dp - p.p_cpl;
            prop_assert!((de - expected).abs() <= 1e-9 * (expected.abs() + p.p_cpl));
        }
    }
}
