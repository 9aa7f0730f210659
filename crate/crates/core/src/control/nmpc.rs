use nalgebra::{SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, ReducedState};
use crate::error::Result;
use crate::geometry::{wrap, RingIndex};
use crate::residual::{hybrid_step, HybridModel};

use super::ilqr::{
    ilqr_solve, state_diff, Dynamics, IlqrConfig, IlqrSolution, QuadraticCost, Trajectory,
};
use super::CostSpec;

/// The agent's hybrid model seen as a fixed-ring `(β, γ, θ, θ̇)` system.
pub struct MazeDynamics<'a> {
    pub model: &'a HybridModel,
    pub ring: RingIndex,
}

impl<'a> MazeDynamics<'a> {
    pub fn new(model: &'a HybridModel, ring: RingIndex) -> Self {
        MazeDynamics { model, ring }
    }
}

impl Dynamics<4, 2> for MazeDynamics<'_> {
    fn step(&self, x: &Vector4<f64>, u: &Vector2<f64>) -> Result<Vector4<f64>> {
        let s = ReducedState::from_array([x[0], x[1], x[2], x[3]], self.ring);
        let n = hybrid_step(self.model, &s, Action::new(u[0], u[1]))?;
        Ok(Vector4::from(n.to_array()))
    }

    fn angle_index(&self) -> Option<usize> {
        Some(2)
    }
}

pub type ReferenceTrajectory = Trajectory<4, 2>;

impl ReferenceTrajectory {
    /// Reference state at tick `k`, holding the terminal state past the end.
    pub fn state_at(&self, k: usize) -> Vector4<f64> {
        self.states[k.min(self.states.len() - 1)]
    }

    /// Reference action at tick `k`, holding the last action past the end.
    pub fn control_at(&self, k: usize) -> Vector2<f64> {
        if self.controls.is_empty() {
            return Vector2::zeros();
        }
        self.controls[k.min(self.controls.len() - 1)]
    }
}

/// Initial controls that tilt the platform along the tangent toward `gate`
/// for the first third of the horizon. Coulomb friction makes the engine
/// flat in every direction at rest, so an all-zero start never moves.
pub fn nudge_controls(
    x0: &ReducedState,
    gate: f64,
    horizon: usize,
    magnitude: f64,
) -> Vec<Vector2<f64>> {
    let dir = wrap(gate - x0.theta).signum();
    let push = Vector2::new(-x0.theta.sin(), x0.theta.cos()) * (dir * magnitude);
    let on = horizon.div_ceil(3);
    (0..horizon)
        .map(|k| if k < on { push } else { Vector2::zeros() })
        .collect()
}

/// Plans a `horizon`-step trajectory from `x0` to rest at `gate` on a level
/// platform, starting from `init` or, when that is `None`, from
/// [`nudge_controls`].
pub fn plan_to_gate(
    model: &HybridModel,
    x0: &ReducedState,
    gate: f64,
    cost: &CostSpec,
    horizon: usize,
    init: Option<&[Vector2<f64>]>,
    config: &IlqrConfig,
) -> Result<IlqrSolution<4, 2>> {
    let dynamics = MazeDynamics::new(model, x0.ring);
    let target = Vector4::new(0.0, 0.0, gate, 0.0);
    let qc = QuadraticCost::regulate(cost.w_vec(), cost.lambda_u, target, horizon);
    let nudge;
    let init = match init.filter(|u| u.len() == horizon) {
        Some(u) => u,
        None => {
            nudge = nudge_controls(x0, gate, horizon, 0.3);
            &nudge
        }
    };
    ilqr_solve(&dynamics, &Vector4::from(x0.to_array()), &qc, init, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmpcConfig {
    /// Tracking horizon in ticks.
    pub horizon: usize,
    /// iLQR iteration budget per tick.
    pub max_iterations: usize,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        NmpcConfig {
            horizon: 10,
            max_iterations: 3,
        }
    }
}

/// Per-tick solver telemetry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickTelemetry {
    pub tick: usize,
    pub iterations: usize,
    pub cost: f64,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NmpcTick {
    /// Desired platform action for this tick, before the inverse motor model.
    pub action: Action,
    /// Control sequence to warm start the next tick (not yet shifted).
    pub warm: Vec<Vector2<f64>>,
    pub telemetry: TickTelemetry,
}

/// One NMPC tick: tracks `reference` from tick `k` over `config.horizon`
/// steps with cost `Σ ‖x_j ⊖ x^ref_{k+j}‖²_Q + λ_u ‖u_j − u^ref_{k+j}‖²`.
///
/// `warm` is the previous tick's control sequence; it is shifted by one
/// tick here. Without it the solve starts from the reference actions. If
/// the solve fails the reference feedback law is applied instead.
pub fn nmpc_tick(
    model: &HybridModel,
    x_obs: &ReducedState,
    reference: &ReferenceTrajectory,
    k: usize,
    cost: &CostSpec,
    config: &NmpcConfig,
    warm: Option<&[Vector2<f64>]>,
) -> NmpcTick {
    let h = config.horizon.max(1);
    let dynamics = MazeDynamics::new(model, x_obs.ring);
    let qc = QuadraticCost {
        state_weight: cost.q_vec(),
        terminal_weight: cost.q_vec(),
        control_weight: cost.lambda_u,
        state_targets: (0..=h).map(|j| reference.state_at(k + j)).collect(),
        control_targets: (0..h).map(|j| reference.control_at(k + j)).collect(),
    };
    let init: Vec<Vector2<f64>> = match warm {
        Some(w) if !w.is_empty() => (0..h).map(|j| w[(j + 1).min(w.len() - 1)]).collect(),
        _ => qc.control_targets.clone(),
    };
    let ilqr = IlqrConfig {
        max_iterations: config.max_iterations,
        ..IlqrConfig::default()
    };
    let x0 = Vector4::from(x_obs.to_array());
    match ilqr_solve(&dynamics, &x0, &qc, &init, &ilqr) {
        Ok(sol) => {
            let u = sol.trajectory.controls[0];
            NmpcTick {
                action: Action::new(u[0], u[1]),
                warm: sol.trajectory.controls,
                telemetry: TickTelemetry {
                    tick: k,
                    iterations: sol.iterations,
                    cost: sol.cost,
                    fallback: false,
                },
            }
        }
        Err(_) => {
            let kk = k.min(reference.gains.len().saturating_sub(1));
            let dx = state_diff(&x0, &reference.state_at(k), Some(2));
            let gain = reference.gains.get(kk).copied().unwrap_or_default();
            let u: SVector<f64, 2> = reference.control_at(k) + gain * dx;
            let action = Action::new(u[0], u[1]).clamped();
            NmpcTick {
                action,
                warm: Vec::new(),
                telemetry: TickTelemetry {
                    tick: k,
                    iterations: 0,
                    cost: f64::NAN,
                    fallback: true,
                },
            }
        }
    }
}
