//! Friction-parameter estimation: a CMA-ES minimizer and the teacher-forced
//! one-step angle objective it minimizes.

mod buffer;
mod cmaes;
mod friction;

pub use buffer::{Transition, TransitionBuffer};
pub use cmaes::{cma_es_minimize, CmaEsConfig, CmaEsResult, Generation, Termination};
pub use friction::{
    estimate_parameters, friction_objective, one_step_rmse, EstimationConfig, EstimationReport,
};
