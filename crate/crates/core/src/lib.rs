//! Averaged boost-converter DC-microgrid workbench: plant model, energy-
//! coordinate linearization, sliding-mode controllers, a fixed-step
//! closed-loop engine and transient metrics.

// `!(x > 0.0)` style guards deliberately reject NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod control;
pub mod metrics;
pub mod plant;
pub mod sim;
pub mod transform;
