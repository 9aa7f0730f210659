use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExplorationConfig;
use crate::control::TickTelemetry;
use crate::dynamics::{
    inject_noise_with, observe, Action, FrictionParams, NoiseSigma, SimParams, TrajectoryRow,
};
use crate::estimation::{Transition, TransitionBuffer};
use crate::geometry::RingIndex;
use crate::rng::stream;

use super::agent::{AgentController, ControlMode};
use super::world::{ticks_to_seconds, EpisodeStatus, World};

/// Bounded random walk added to the agent's actions. Each component moves
/// by at most `max_step` per tick and stays within `±amplitude`.
#[derive(Clone, Debug)]
pub struct Exploration {
    config: ExplorationConfig,
    offset: Action,
    rng: ChaCha8Rng,
}

impl Exploration {
    pub fn new(config: ExplorationConfig, rng: ChaCha8Rng) -> Self {
        Exploration {
            config,
            offset: Action::default(),
            rng,
        }
    }

    pub fn next_offset(&mut self) -> Action {
        let (a, s) = (self.config.amplitude, self.config.max_step);
        let mut walk = |v: f64| {
            let step = if s > 0.0 {
                self.rng.gen_range(-s..=s)
            } else {
                0.0
            };
            (v + step).clamp(-a, a)
        };
        self.offset = Action::new(walk(self.offset.ux), walk(self.offset.uy));
        self.offset
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOptions {
    pub episode: usize,
    pub time_limit: usize,
    pub spin0: f64,
    pub noise: NoiseSigma,
    pub exploration: Option<ExplorationConfig>,
    /// Keep per-tick trajectory rows and solver telemetry.
    pub record_trajectory: bool,
}

/// One tick of an episode log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickLog {
    pub state: TrajectoryRow,
    pub desired: Action,
    pub command: Action,
    pub mode: ControlMode,
    pub telemetry: Option<TickTelemetry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub solved: bool,
    pub wall_ticks: usize,
    pub per_ring_ticks: Vec<usize>,
    pub final_ring: RingIndex,
    pub replans: usize,
    pub transits: usize,
    pub fallbacks: usize,
    /// Set when the episode was cut short by a simulation or control error.
    pub failure: Option<String>,
    #[serde(skip)]
    pub transitions: TransitionBuffer,
    #[serde(skip)]
    pub log: Vec<TickLog>,
}

impl EpisodeRecord {
    pub fn total_s(&self) -> f64 {
        ticks_to_seconds(&[self.wall_ticks])[0]
    }
}

/// Seconds spent in each ring; ticks of a gate transit count toward the
/// ring being exited.
pub fn per_ring_times(record: &EpisodeRecord) -> Vec<f64> {
    ticks_to_seconds(&record.per_ring_ticks)
}

/// Runs one seeded episode of `agent` against the real system: observe with
/// noise, act, convert through the inverse motor model, step the full model,
/// and store the within-ring transition `(x_k, u_k, x_{k+1})`.
pub fn rollout_episode(
    real_sim: &SimParams,
    real_mu: &FrictionParams,
    agent: &mut AgentController,
    seed: u64,
    opts: &EpisodeOptions,
) -> EpisodeRecord {
    let mut world = World::new(
        real_sim.clone(),
        *real_mu,
        opts.time_limit,
        opts.spin0,
        seed,
    );
    let mut noise_rng = stream(seed, &[1]);
    let mut exploration = opts
        .exploration
        .clone()
        .map(|c| Exploration::new(c, stream(seed, &[2])));
    agent.reset();

    let mut transitions = TransitionBuffer::new();
    let mut log = Vec::new();
    let (mut replans, mut transits, mut fallbacks) = (0, 0, 0);
    let mut failure = None;
    let mut obs = inject_noise_with(&observe(&world.state), &opts.noise, &mut noise_rng);
    let mut was_transit = false;

    while world.status == EpisodeStatus::Running {
        let decision = match agent.act(&obs) {
            Ok(d) => d,
            Err(e) => {
                failure = Some(format!("controller: {e}"));
                break;
            }
        };
        replans += decision.replanned as usize;
        let in_transit = decision.mode == ControlMode::Transit;
        transits += (in_transit && !was_transit) as usize;
        was_transit = in_transit;
        fallbacks += decision.telemetry.is_some_and(|t| t.fallback) as usize;

        let mut desired = decision.desired.clamped();
        if let Some(ex) = &mut exploration {
            let d = ex.next_offset();
            desired = Action::new(desired.ux + d.ux, desired.uy + d.uy).clamped();
        }
        let command = match agent.command(&obs, desired) {
            Ok(c) => c,
            Err(e) => {
                failure = Some(format!("inverse motor model: {e}"));
                break;
            }
        };
        if opts.record_trajectory {
            log.push(TickLog {
                state: TrajectoryRow::full(world.elapsed_s(), &world.state),
                desired,
                command,
                mode: decision.mode,
                telemetry: decision.telemetry,
            });
        }
        let tick = world.tick;
        if let Err(e) = world.step(command) {
            failure = Some(format!("real system: {e}"));
            break;
        }
        let next = inject_noise_with(&observe(&world.state), &opts.noise, &mut noise_rng);
        if next.ring == obs.ring {
            transitions.push(Transition {
                episode: opts.episode,
                tick,
                x: obs,
                u: desired,
                next,
            });
        }
        obs = next;
    }

    EpisodeRecord {
        episode: opts.episode,
        seed,
        solved: world.status == EpisodeStatus::Solved,
        wall_ticks: world.tick,
        per_ring_ticks: world.ring_ticks.clone(),
        final_ring: world.ring(),
        replans,
        transits,
        fallbacks,
        failure,
        transitions,
        log,
    }
}
