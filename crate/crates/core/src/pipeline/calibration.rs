use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExplorationConfig};
use crate::dynamics::{
    inject_noise_with, observe, step_full, step_reduced, FrictionParams, ReducedState, CONTROL_DT,
};
use crate::error::{Error, Result};
use crate::estimation::{
    estimate_parameters, one_step_rmse, EstimationReport, Transition, TransitionBuffer,
};
use crate::geometry::RingIndex;
use crate::motor::{arx_rmse, excite_and_collect, fit_arx, imm_invert, ArxModel, Platform};
use crate::rng::{derive_seed, stream};

use super::episode::Exploration;
use super::world::random_start_in;

/// Identified inverse motor model and its fit quality on the excitation data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotorReport {
    pub arx: ArxModel,
    pub rmse: [f64; 2],
    pub angle_std: [f64; 2],
    pub samples: usize,
}

/// Excites the real servo and fits the per-axis ARX model.
pub fn identify_motor(cfg: &ExperimentConfig) -> Result<MotorReport> {
    let platform = Platform {
        servo: cfg.servo,
        dt: CONTROL_DT,
        substeps: cfg.physics.substeps,
    };
    let mut excitation = cfg.excitation.clone();
    excitation.seed = derive_seed(cfg.seed, &[STREAM_MOTOR, excitation.seed]);
    let data = excite_and_collect(&platform, &excitation)?;
    let arx = fit_arx(&data, cfg.servo.max_tilt)?;
    let mut angle_std = [0.0; 2];
    for (axis, out) in angle_std.iter_mut().enumerate() {
        let n = data.len() as f64;
        let mean = data.iter().map(|s| s.next_angle[axis]).sum::<f64>() / n;
        *out = (data
            .iter()
            .map(|s| (s.next_angle[axis] - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
    }
    Ok(MotorReport {
        rmse: arx_rmse(&arx, &data),
        arx,
        angle_std,
        samples: data.len(),
    })
}

pub(crate) const STREAM_MOTOR: u64 = 0x6d6f746f72;
const STREAM_RANDOM_POLICY: u64 = 0x72616e64;

/// Transitions of the real system under a smooth random policy, started at
/// rest from random angles in every ring. Desired actions pass through the
/// inverse motor model `arx` like the agent's do.
pub fn random_policy_data(
    cfg: &ExperimentConfig,
    arx: &ArxModel,
    seed: u64,
    starts_per_ring: usize,
    ticks_per_start: usize,
) -> Result<TransitionBuffer> {
    let sim = cfg.real_sim();
    let geom = &sim.geometry;
    let policy = ExplorationConfig {
        amplitude: 1.0,
        ..cfg.learning.exploration.clone()
    };
    let mut out = TransitionBuffer::new();
    for ring in 0..geom.num_rings() {
        for start in 0..starts_per_ring {
            let episode = ring * starts_per_ring + start;
            let path = [STREAM_RANDOM_POLICY, ring as u64, start as u64];
            let mut rng = stream(seed, &path);
            let mut state =
                random_start_in(geom, RingIndex(ring), cfg.episode.initial_spin, &mut rng);
            let mut walk = Exploration::new(
                policy.clone(),
                stream(seed, &[path[0], path[1], path[2], 1]),
            );
            let mut noise_rng = stream(seed, &[path[0], path[1], path[2], 2]);
            let mut obs = inject_noise_with(&observe(&state), &cfg.episode.noise, &mut noise_rng);
            for tick in 0..ticks_per_start {
                let u = walk.next_offset();
                let m = arx.max_tilt;
                let command = imm_invert(arx, (obs.beta, obs.gamma), (u.ux * m, u.uy * m))?;
                state = step_full(&state, command, &cfg.friction.real, CONTROL_DT, &sim)?;
                let next = inject_noise_with(&observe(&state), &cfg.episode.noise, &mut noise_rng);
                if next.ring != obs.ring {
                    break;
                }
                out.push(Transition {
                    episode,
                    tick,
                    x: obs,
                    u,
                    next,
                });
                obs = next;
            }
        }
    }
    Ok(out)
}

/// Keeps only the rings with at least `min` transitions.
pub fn rings_with_at_least(data: &TransitionBuffer, min: usize) -> TransitionBuffer {
    let counts = data.count_by_ring();
    data.iter()
        .filter(|t| counts[&t.x.ring] >= min)
        .copied()
        .collect()
}

/// One row of the open-loop comparison between the real system and the
/// reduced engine before and after calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub ring: usize,
    pub real_theta: f64,
    pub calibrated_theta: f64,
    pub default_theta: f64,
}

/// Replays the actions of one contiguous run of transitions open loop
/// through the reduced engine under two friction settings.
pub fn open_loop_comparison(
    run: &[Transition],
    calibrated: &FrictionParams,
    default: &FrictionParams,
    cfg: &ExperimentConfig,
) -> Result<Vec<ComparisonRow>> {
    let Some(first) = run.first() else {
        return Ok(Vec::new());
    };
    let sim = cfg.agent_sim();
    let (mut a, mut b): (ReducedState, ReducedState) = (first.x, first.x);
    let mut rows = vec![ComparisonRow {
        t: 0.0,
        ring: first.x.ring.0,
        real_theta: first.x.theta,
        calibrated_theta: a.theta,
        default_theta: b.theta,
    }];
    for (i, t) in run.iter().enumerate() {
        a = step_reduced(&a, t.u, calibrated, CONTROL_DT, &sim)?;
        b = step_reduced(&b, t.u, default, CONTROL_DT, &sim)?;
        rows.push(ComparisonRow {
            t: (i + 1) as f64 * CONTROL_DT,
            ring: t.x.ring.0,
            real_theta: t.next.theta,
            calibrated_theta: a.theta,
            default_theta: b.theta,
        });
    }
    Ok(rows)
}

/// Calibration on a small random-policy training set, judged on a larger
/// held-out set from different starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStudy {
    pub motor: MotorReport,
    pub estimation: EstimationReport,
    pub train_transitions: usize,
    pub heldout_transitions: usize,
    pub heldout_rmse_default: f64,
    pub heldout_rmse_calibrated: f64,
    pub comparison: Vec<ComparisonRow>,
}

pub fn calibration_study(
    cfg: &ExperimentConfig,
    per_ring: usize,
    heldout_starts: usize,
) -> Result<CalibrationStudy> {
    let motor = identify_motor(cfg)?;
    let train_all = random_policy_data(cfg, &motor.arx, derive_seed(cfg.seed, &[1]), 3, per_ring)?;
    let train = train_all.take_per_ring(per_ring);
    let heldout = random_policy_data(
        cfg,
        &motor.arx,
        derive_seed(cfg.seed, &[2]),
        heldout_starts,
        60,
    )?;
    if heldout.is_empty() {
        return Err(Error::Domain(
            "random policy produced no held-out transitions".into(),
        ));
    }
    let sim = cfg.agent_sim();
    let estimation_cfg = crate::estimation::EstimationConfig {
        min_per_ring: cfg.estimation.min_per_ring.min(per_ring),
        seed: derive_seed(cfg.seed, &[3, cfg.estimation.seed]),
        ..cfg.estimation.clone()
    };
    let estimation = estimate_parameters(&train, &cfg.friction.initial, &sim, &estimation_cfg)?;
    let run: Vec<Transition> = heldout
        .iter()
        .take_while(|t| t.episode == 0)
        .copied()
        .collect();
    Ok(CalibrationStudy {
        heldout_rmse_default: one_step_rmse(heldout.as_slice(), &cfg.friction.initial, &sim)?,
        heldout_rmse_calibrated: one_step_rmse(heldout.as_slice(), &estimation.mu_star, &sim)?,
        comparison: open_loop_comparison(&run, &estimation.mu_star, &cfg.friction.initial, cfg)?,
        train_transitions: train.len(),
        heldout_transitions: heldout.len(),
        estimation,
        motor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motor_fit_is_accurate() {
        let cfg = ExperimentConfig::default();
        let m = identify_motor(&cfg).unwrap();
        for axis in 0..2 {
            assert!(m.rmse[axis] < 0.05 * m.angle_std[axis], "{m:?}");
        }
    }

    #[test]
    fn random_policy_covers_every_ring_and_chains() {
        let cfg = ExperimentConfig::default();
        let arx = cfg.servo.lag_arx(CONTROL_DT);
        let d = random_policy_data(&cfg, &arx, 5, 2, 30).unwrap();
        let counts = d.count_by_ring();
        assert_eq!(counts.len(), 4);
        for w in d.as_slice().windows(2) {
            if w[0].episode == w[1].episode {
                assert_eq!(w[1].x, w[0].next);
            }
        }
        assert_eq!(d, random_policy_data(&cfg, &arx, 5, 2, 30).unwrap());
        let few = rings_with_at_least(&d, usize::MAX);
        assert!(few.is_empty());
    }
}
