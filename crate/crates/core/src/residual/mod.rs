//! Gaussian-process residual models and the hybrid engine + GP dynamics.

mod gp;
mod hybrid;

pub use gp::{
    features, gp_fit, linear_kernel, GpFitConfig, GpHyper, GpInput, GpModel, DESIGN_DIM,
    NUM_FEATURES,
};
pub use hybrid::{fit_residual, gp_input, hybrid_step, HybridModel, ResidualConfig, RingHeads};
