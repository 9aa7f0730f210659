use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_full, Action, FrictionParams, FullState, SimParams, CONTROL_DT};
use crate::error::Result;
use crate::geometry::{wrap, MazeGeometry, RingIndex};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    Solved,
    TimedOut,
}

/// Random start on the outermost ring: uniform angle, marble on the channel
/// center line at rest, level platform, spin uniform in `±spin0`.
pub fn random_reset<R: Rng + ?Sized>(geom: &MazeGeometry, spin0: f64, rng: &mut R) -> FullState {
    random_start_in(geom, RingIndex::OUTER, spin0, rng)
}

/// As [`random_reset`], on an arbitrary ring.
pub fn random_start_in<R: Rng + ?Sized>(
    geom: &MazeGeometry,
    ring: RingIndex,
    spin0: f64,
    rng: &mut R,
) -> FullState {
    let theta = wrap(rng.gen_range(-PI..PI));
    let spin = if spin0 > 0.0 {
        rng.gen_range(-spin0..spin0)
    } else {
        0.0
    };
    FullState {
        beta: 0.0,
        gamma: 0.0,
        theta,
        theta_dot: 0.0,
        ring,
        rho: geom.ring_radii[ring.0],
        rho_dot: 0.0,
        spin,
    }
}

/// The stand-in real system: full model, real servo, per-ring timers.
#[derive(Clone, Debug)]
pub struct World {
    pub sim: SimParams,
    pub mu: FrictionParams,
    pub state: FullState,
    pub tick: usize,
    /// Ticks spent in each ring, attributed to the ring at the start of the tick.
    pub ring_ticks: Vec<usize>,
    pub status: EpisodeStatus,
    pub time_limit: usize,
    pub spin0: f64,
}

impl World {
    /// A world reset with `seed`.
    pub fn new(
        sim: SimParams,
        mu: FrictionParams,
        time_limit: usize,
        spin0: f64,
        seed: u64,
    ) -> Self {
        let n = sim.geometry.num_rings();
        let mut w = World {
            state: random_reset(&sim.geometry, spin0, &mut stream(seed, &[])),
            sim,
            mu,
            tick: 0,
            ring_ticks: vec![0; n],
            status: EpisodeStatus::Running,
            time_limit,
            spin0,
        };
        w.reset(seed);
        w
    }

    /// Restarts the episode from a seeded random outer-ring placement.
    pub fn reset(&mut self, seed: u64) {
        self.state = random_reset(&self.sim.geometry, self.spin0, &mut stream(seed, &[]));
        self.tick = 0;
        self.ring_ticks.iter_mut().for_each(|t| *t = 0);
        self.status = if self.time_limit == 0 {
            EpisodeStatus::TimedOut
        } else {
            EpisodeStatus::Running
        };
    }

    pub fn ring(&self) -> RingIndex {
        self.state.ring
    }

    /// Advances one control tick with the servo `command`. A finished world
    /// does not move. On an integration error the world is left unchanged.
    pub fn step(&mut self, command: Action) -> Result<()> {
        if self.status != EpisodeStatus::Running {
            return Ok(());
        }
        let next = step_full(&self.state, command, &self.mu, CONTROL_DT, &self.sim)?;
        if let Some(t) = self.ring_ticks.get_mut(self.state.ring.0) {
            *t += 1;
        }
        self.state = next;
        self.tick += 1;
        if self.sim.geometry.is_goal(self.state.ring) {
            self.status = EpisodeStatus::Solved;
        } else if self.tick >= self.time_limit {
            self.status = EpisodeStatus::TimedOut;
        }
        Ok(())
    }

    pub fn per_ring_seconds(&self) -> Vec<f64> {
        ticks_to_seconds(&self.ring_ticks)
    }

    pub fn elapsed_s(&self) -> f64 {
        self.tick as f64 * CONTROL_DT
    }
}

pub fn ticks_to_seconds(ticks: &[usize]) -> Vec<f64> {
    ticks.iter().map(|t| *t as f64 * CONTROL_DT).collect()
}
