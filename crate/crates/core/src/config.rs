//! Experiment configuration, loaded from TOML. Every field has a default so
//! a config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{CostSpec, NmpcConfig};
use crate::dynamics::{FrictionParams, NoiseSigma, SimParams};
use crate::error::{Error, Result};
use crate::estimation::EstimationConfig;
use crate::geometry::MazeGeometry;
use crate::motor::{Excitation, ServoParams};
use crate::residual::ResidualConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub substeps: usize,
    pub stiction_velocity: f64,
    pub wall_restitution: f64,
    pub spin_coupling: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        let s = SimParams::default();
        PhysicsConfig {
            substeps: s.substeps,
            stiction_velocity: s.stiction_velocity,
            wall_restitution: s.wall_restitution,
            spin_coupling: s.spin_coupling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrictionConfig {
    /// Friction of the stand-in real system.
    pub real: FrictionParams,
    /// Friction the agent's engine starts from before calibration.
    pub initial: FrictionParams,
}

impl Default for FrictionConfig {
    fn default() -> Self {
        FrictionConfig {
            real: FrictionParams::FULL_DEFAULT,
            initial: FrictionParams::REDUCED_DEFAULT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanningConfig {
    /// Trajectory optimization horizon in ticks.
    pub horizon: usize,
    pub max_iterations: usize,
    /// Replan when the observed angle strays this far (rad) from the reference.
    pub replan_theta_error: f64,
    /// Magnitude of the tangential tilt that seeds each plan.
    pub nudge: f64,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        PlanningConfig {
            horizon: 45,
            max_iterations: 100,
            replan_theta_error: 0.3,
            nudge: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitConfig {
    /// Engage only within this angle (rad) of the gate.
    pub angle_tolerance: f64,
    /// Engage only below this angular speed (rad/s).
    pub rate_tolerance: f64,
    /// Nominal open-loop tilt duration in seconds.
    pub duration_s: f64,
    /// Give up after this multiple of the nominal duration.
    pub timeout_factor: f64,
    /// Tilt toward the maze center as a fraction of the tilt limit.
    pub tilt_fraction: f64,
}

impl Default for TransitConfig {
    fn default() -> Self {
        TransitConfig {
            angle_tolerance: 0.05,
            rate_tolerance: 0.5,
            duration_s: 0.5,
            timeout_factor: 3.0,
            tilt_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub time_limit_s: f64,
    /// Initial marble spin is drawn uniformly from `±initial_spin` rad/s.
    pub initial_spin: f64,
    pub noise: NoiseSigma,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            time_limit_s: 60.0,
            initial_spin: 2.0,
            noise: NoiseSigma::default(),
        }
    }
}

/// Random perturbation added to the agent's actions while collecting the
/// first calibration episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    /// Bound on the perturbation of each action component.
    pub amplitude: f64,
    /// Largest per-tick change of the perturbation.
    pub max_step: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            amplitude: 0.6,
            max_step: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningConfig {
    /// Rollouts collected per stage.
    pub episodes_per_stage: usize,
    pub gp_stages: usize,
    pub eval_episodes: usize,
    pub exploration: ExplorationConfig,
    /// Worker threads for independent episodes; 0 uses all cores.
    pub threads: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            episodes_per_stage: 5,
            gp_stages: 3,
            eval_episodes: 10,
            exploration: ExplorationConfig::default(),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub address: String,
    pub max_sessions: usize,
    /// Directory for session logs, relative to the output directory.
    pub log_dir: PathBuf,
    /// Model snapshot driving agent sessions.
    pub agent_model: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            address: "127.0.0.1:8765".into(),
            max_sessions: 8,
            log_dir: PathBuf::from("sessions"),
            agent_model: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub geometry: MazeGeometry,
    pub servo: ServoParams,
    pub physics: PhysicsConfig,
    pub friction: FrictionConfig,
    pub excitation: Excitation,
    pub episode: EpisodeConfig,
    pub planning: PlanningConfig,
    pub nmpc: NmpcConfig,
    pub cost: CostSpec,
    pub transit: TransitConfig,
    pub estimation: EstimationConfig,
    pub residual: ResidualConfig,
    pub learning: LearningConfig,
    pub server: ServerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            geometry: MazeGeometry::default(),
            servo: ServoParams::default(),
            physics: PhysicsConfig::default(),
            friction: FrictionConfig::default(),
            excitation: Excitation::default(),
            episode: EpisodeConfig::default(),
            planning: PlanningConfig::default(),
            nmpc: NmpcConfig::default(),
            cost: CostSpec::default(),
            transit: TransitConfig::default(),
            estimation: EstimationConfig::default(),
            residual: ResidualConfig::default(),
            learning: LearningConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Physics of the stand-in real system, with the real servo.
    pub fn real_sim(&self) -> SimParams {
        SimParams {
            geometry: self.geometry.clone(),
            servo: self.servo,
            substeps: self.physics.substeps,
            stiction_velocity: self.physics.stiction_velocity,
            wall_restitution: self.physics.wall_restitution,
            spin_coupling: self.physics.spin_coupling,
        }
    }

    /// Physics of the agent's engine: same maze, instantaneous actuation.
    pub fn agent_sim(&self) -> SimParams {
        self.real_sim().with_ideal_servo()
    }

    pub fn time_limit_ticks(&self) -> usize {
        (self.episode.time_limit_s * 30.0).round().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.real_sim().validate()?;
        if (self.servo.max_tilt - self.geometry.max_tilt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "servo.max_tilt ({}) must equal geometry.max_tilt ({})",
                self.servo.max_tilt, self.geometry.max_tilt
            )));
        }
        self.friction.real.validate()?;
        self.friction.initial.validate()?;
        self.cost.validate()?;
        if self.planning.horizon == 0 || self.nmpc.horizon == 0 {
            return Err(Error::Config(
                "planning and tracking horizons must be positive".into(),
            ));
        }
        if !(self.episode.time_limit_s >= 0.0) {
            return Err(Error::Config(
                "episode time limit must be non-negative".into(),
            ));
        }
        if self.episode.noise.theta < 0.0 || self.episode.noise.theta_dot < 0.0 {
            return Err(Error::Config(
                "noise standard deviations must be non-negative".into(),
            ));
        }
        let t = &self.transit;
        if !(t.angle_tolerance > 0.0
            && t.rate_tolerance > 0.0
            && t.duration_s > 0.0
            && t.timeout_factor >= 1.0)
        {
            return Err(Error::Config(format!("invalid transit settings {t:?}")));
        }
        if !(t.tilt_fraction > 0.0 && t.tilt_fraction <= 1.0) {
            return Err(Error::Config(
                "transit tilt_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.learning.episodes_per_stage == 0 {
            return Err(Error::Config("episodes_per_stage must be positive".into()));
        }
        Ok(())
    }
}
