//! Exact feedback linearization of the converter into energy coordinates.
//!
//! `zeta1` is the stored energy `½L·i² + ½C_eff·v²` and `zeta2` its time
//! derivative along the plant dynamics. Because that derivative does not
//! depend on the duty ratio, the pair forms a chain of integrators
//! `zeta1' = zeta2`, `zeta2' = a(x) + b(x)·mu`.

use thiserror::Error;

use crate::plant::{PlantParams, PlantState};

/// Smallest admissible `b(x)` before the control law refuses to divide.
pub const DEFAULT_B_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("linearization is singular: b(x) = {b_x} is not above {b_min}")]
    Singular { b_x: f64, b_min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalState {
    /// Stored energy, J.
    pub zeta1: f64,
    /// Energy rate, W.
    pub zeta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizationCoeffs {
    pub a_x: f64,
    pub b_x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFrame {
    pub v_dc_ref: f64,
    pub i_l_ref: f64,
    pub zeta1_ref: f64,
    pub zeta1_ref_dot: f64,
    pub zeta1_ref_ddot: f64,
}

pub fn stored_energy(state: PlantState, params: &PlantParams) -> f64 {
    0.5 * params.l_ind * state.i_l * state.i_l + 0.5 * params.c_eff() * state.v_dc * state.v_dc
}

pub fn to_canonical(state: PlantState, params: &PlantParams, v_in: f64, delta_p_vir: f64) -> CanonicalState {
    let PlantState { i_l, v_dc } = state;
    CanonicalState {
        zeta1: stored_energy(state, params),
        zeta2: v_in * i_l - v_dc * v_dc * params.g_load() + delta_p_vir - params.p_cpl,
    }
}

pub fn linearization_coeffs(
    state: PlantState,
    params: &PlantParams,
    v_in: f64,
    delta_p_vir: f64,
) -> Result<LinearizationCoeffs, TransformError> {
    linearization_coeffs_with_floor(state, params, v_in, delta_p_vir, DEFAULT_B_MIN)
}

pub fn linearization_coeffs_with_floor(
    state: PlantState,
    params: &PlantParams,
    v_in: f64,
    delta_p_vir: f64,
    b_min: f64,
) -> Result<LinearizationCoeffs, TransformError> {
    let PlantState { i_l: x1, v_dc: x2 } = state;
    let l = params.l_ind;
    let g = params.g_load();
    let c_eff = params.c_eff();

    let mut a_x = v_in * (v_in - x2) / l;
    let mut b_x = v_in * x2 / l;
    if g > 0.0 {
        let bus_current = x1 - x2 * g + delta_p_vir / x2 - params.p_cpl / x2;
        a_x -= 2.0 * x2 * g / c_eff * bus_current;
        b_x += 2.0 * x1 * x2 * g / c_eff;
    }
    if !(b_x > b_min) {
        return Err(TransformError::Singular { b_x, b_min });
    }
    Ok(LinearizationCoeffs { a_x, b_x })
}

/// Energy reference for a piecewise-constant bus-voltage reference.
///
/// `v_in` is the scheduled supply voltage; the inductor-current reference
/// follows it so that a supply sag moves the energy target with it.
/// Reference derivatives are zero: steps are left to the feedback.
pub fn reference_frame(v_dc_ref: f64, v_in: f64, params: &PlantParams) -> ReferenceFrame {
    let i_l_ref = params.p_cpl / v_in;
    let zeta1_ref = 0.5 * params.l_ind * i_l_ref * i_l_ref + 0.5 * params.c_eff() * v_dc_ref * v_dc_ref;
    ReferenceFrame { v_dc_ref, i_l_ref, zeta1_ref, zeta1_ref_dot: 0.0, zeta1_ref_ddot: 0.0 }
}
