//! iLQR trajectory optimization toward a gate and NMPC tracking of the
//! resulting reference at the control rate.

mod ilqr;
mod nmpc;

pub use ilqr::{
    ilqr_solve, linearize, state_diff, Dynamics, IlqrConfig, IlqrSolution, QuadraticCost,
    Trajectory,
};
pub use nmpc::{
    nmpc_tick, nudge_controls, plan_to_gate, MazeDynamics, NmpcConfig, NmpcTick,
    ReferenceTrajectory, TickTelemetry,
};

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the planning (`w`) and tracking (`q`) costs over
/// `(β, γ, θ, θ̇)`, and the control weight shared by both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub w: [f64; 4],
    pub lambda_u: f64,
    pub q: [f64; 4],
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            w: [4.0, 4.0, 1.0, 0.4],
            lambda_u: 20.0,
            q: [4.0, 4.0, 1.0, 0.4],
        }
    }
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .w
            .iter()
            .chain(&self.q)
            .chain(std::iter::once(&self.lambda_u));
        if all.clone().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "cost weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn w_vec(&self) -> SVector<f64, 4> {
        SVector::from(self.w)
    }

    pub fn q_vec(&self) -> SVector<f64, 4> {
        SVector::from(self.q)
    }
}
