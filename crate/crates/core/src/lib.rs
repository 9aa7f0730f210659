//! Model-based control of a marble in a circular tip-tilt maze.
//!
//! A high-fidelity "real" simulator is controlled by an agent that plans with
//! a reduced physics engine. The engine's friction parameters are calibrated
//! with CMA-ES, its remaining one-step error is learned by Gaussian-process
//! residual models, and the resulting hybrid model drives iLQR trajectory
//! optimization and NMPC tracking at the 30 Hz control rate.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod motor;
pub mod pipeline;
pub mod records;
pub mod residual;
pub mod rng;

pub use error::{Error, Result};
