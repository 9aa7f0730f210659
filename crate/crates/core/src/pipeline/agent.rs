use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PlanningConfig, TransitConfig};
use crate::control::{
    nmpc_tick, nudge_controls, CostSpec, IlqrConfig, NmpcConfig, ReferenceTrajectory, TickTelemetry,
};
use crate::dynamics::{Action, ReducedState, CONTROL_DT};
use crate::error::Result;
use crate::geometry::{wrap, RingIndex};
use crate::motor::{imm_invert, ArxModel};
use crate::residual::HybridModel;

/// Controller settings shared by every agent episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub cost: CostSpec,
    pub planning: PlanningConfig,
    pub nmpc: NmpcConfig,
    pub transit: TransitConfig,
}

impl From<&ExperimentConfig> for AgentConfig {
    fn from(cfg: &ExperimentConfig) -> Self {
        AgentConfig {
            cost: cfg.cost.clone(),
            planning: cfg.planning.clone(),
            nmpc: cfg.nmpc.clone(),
            transit: cfg.transit.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Nmpc,
    Transit,
    /// Planning failed; the platform is held level until the next tick.
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    /// Desired platform action, before the inverse motor model.
    pub desired: Action,
    pub mode: ControlMode,
    pub telemetry: Option<TickTelemetry>,
    pub replanned: bool,
}

#[derive(Clone, Debug)]
struct Plan {
    ring: RingIndex,
    gate: f64,
    reference: ReferenceTrajectory,
    /// Ticks elapsed since the plan was made.
    k: usize,
    warm: Vec<Vector2<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct Transit {
    ring: RingIndex,
    gate: f64,
    ticks: usize,
}

/// Open-loop push toward the maze center along the gate's radial direction.
pub fn transit_action(gate: f64, tilt_fraction: f64) -> Action {
    Action::new(-tilt_fraction * gate.cos(), -tilt_fraction * gate.sin())
}

/// Can the transit maneuver start from `x` toward `gate`?
pub fn transit_ready(x: &ReducedState, gate: f64, cfg: &TransitConfig) -> bool {
    wrap(x.theta - gate).abs() < cfg.angle_tolerance && x.theta_dot.abs() < cfg.rate_tolerance
}

/// The agent: plans to the nearest gate with iLQR, tracks the plan with
/// NMPC, hands over to the transit maneuver at the gate, and converts its
/// desired platform actions into servo commands with the inverse motor model.
#[derive(Clone, Debug)]
pub struct AgentController {
    pub model: HybridModel,
    pub arx: ArxModel,
    pub config: AgentConfig,
    plan: Option<Plan>,
    transit: Option<Transit>,
}

impl AgentController {
    pub fn new(model: HybridModel, arx: ArxModel, config: AgentConfig) -> Self {
        AgentController {
            model,
            arx,
            config,
            plan: None,
            transit: None,
        }
    }

    /// Forgets the current plan and maneuver, as at the start of an episode.
    pub fn reset(&mut self) {
        self.plan = None;
        self.transit = None;
    }

    fn transit_timeout(&self) -> usize {
        let t = &self.config.transit;
        (t.timeout_factor * t.duration_s / CONTROL_DT).round() as usize
    }

    /// Chooses the desired platform action for observation `obs`.
    pub fn act(&mut self, obs: &ReducedState) -> Result<Decision> {
        let geom = &self.model.sim.geometry;
        if geom.is_goal(obs.ring) {
            return Ok(self.idle(false));
        }
        let timeout = self.transit_timeout();
        if let Some(t) = &mut self.transit {
            if obs.ring == t.ring && t.ticks < timeout {
                t.ticks += 1;
                return Ok(Decision {
                    desired: transit_action(t.gate, self.config.transit.tilt_fraction),
                    mode: ControlMode::Transit,
                    telemetry: None,
                    replanned: false,
                });
            }
            // crossed, or timed out: NMPC takes over with a fresh plan
            self.transit = None;
            self.plan = None;
        }

        let gate = match &self.plan {
            Some(p) if p.ring == obs.ring => p.gate,
            _ => geom.nearest_gate(obs.ring, obs.theta)?,
        };
        if transit_ready(obs, gate, &self.config.transit) {
            self.transit = Some(Transit {
                ring: obs.ring,
                gate,
                ticks: 1,
            });
            return Ok(Decision {
                desired: transit_action(gate, self.config.transit.tilt_fraction),
                mode: ControlMode::Transit,
                telemetry: None,
                replanned: false,
            });
        }

        let replanned = self.needs_replan(obs);
        if replanned {
            match self.replan(obs) {
                Ok(p) => self.plan = Some(p),
                Err(_) => {
                    self.plan = None;
                    return Ok(self.idle(true));
                }
            }
        }
        let plan = self.plan.as_mut().expect("plan exists after replanning");
        let warm = (!plan.warm.is_empty()).then_some(plan.warm.as_slice());
        let tick = nmpc_tick(
            &self.model,
            obs,
            &plan.reference,
            plan.k,
            &self.config.cost,
            &self.config.nmpc,
            warm,
        );
        plan.k += 1;
        plan.warm = tick.warm;
        Ok(Decision {
            desired: tick.action,
            mode: ControlMode::Nmpc,
            telemetry: Some(tick.telemetry),
            replanned,
        })
    }

    fn idle(&self, replanned: bool) -> Decision {
        Decision {
            desired: Action::default(),
            mode: ControlMode::Idle,
            telemetry: None,
            replanned,
        }
    }

    fn needs_replan(&self, obs: &ReducedState) -> bool {
        let Some(p) = &self.plan else { return true };
        if p.ring != obs.ring {
            return true;
        }
        let reference = p.reference.state_at(p.k);
        if wrap(obs.theta - reference[2]).abs() > self.config.planning.replan_theta_error {
            return true;
        }
        // an exhausted plan is kept only while it holds the marble at the gate
        p.k >= p.reference.controls.len()
            && wrap(obs.theta - p.gate).abs() >= self.config.transit.angle_tolerance
    }

    fn replan(&self, obs: &ReducedState) -> Result<Plan> {
        let gate = self.model.sim.geometry.nearest_gate(obs.ring, obs.theta)?;
        let planning = &self.config.planning;
        let init = nudge_controls(obs, gate, planning.horizon, planning.nudge);
        let ilqr = IlqrConfig {
            max_iterations: planning.max_iterations,
            ..IlqrConfig::default()
        };
        let sol = crate::control::plan_to_gate(
            &self.model,
            obs,
            gate,
            &self.config.cost,
            planning.horizon,
            Some(&init),
            &ilqr,
        )?;
        Ok(Plan {
            ring: obs.ring,
            gate,
            reference: sol.trajectory,
            k: 0,
            warm: Vec::new(),
        })
    }

    /// Servo command that moves the platform from its observed angles to the
    /// desired action's tilt in one tick, as far as the servo allows.
    pub fn command(&self, obs: &ReducedState, desired: Action) -> Result<Action> {
        let d = desired.clamped();
        let m = self.arx.max_tilt;
        imm_invert(&self.arx, (obs.beta, obs.gamma), (d.ux * m, d.uy * m))
    }

    pub fn in_transit(&self) -> bool {
        self.transit.is_some()
    }

    /// Gate targeted by the current plan or maneuver.
    pub fn target_gate(&self) -> Option<f64> {
        self.transit
            .map(|t| t.gate)
            .or(self.plan.as_ref().map(|p| p.gate))
    }
}
