use serde::{Deserialize, Serialize};

use crate::dynamics::{step_reduced, FrictionParams, SimParams, CONTROL_DT};
use crate::error::{Error, Result};
use crate::geometry::wrap;

use super::buffer::{Transition, TransitionBuffer};
use super::cmaes::{cma_es_minimize, CmaEsConfig, CmaEsResult};

/// Mean squared wrapped error of teacher-forced one-step angle predictions.
pub fn friction_objective(
    data: &[Transition],
    mu: &FrictionParams,
    sim: &SimParams,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain(
            "friction objective needs at least one transition".into(),
        ));
    }
    let mut sum = 0.0;
    for t in data {
        let pred = step_reduced(&t.x, t.u, mu, CONTROL_DT, sim)?;
        let e = wrap(t.next.theta - pred.theta);
        sum += e * e;
    }
    Ok(sum / data.len() as f64)
}

pub fn one_step_rmse(data: &[Transition], mu: &FrictionParams, sim: &SimParams) -> Result<f64> {
    friction_objective(data, mu, sim).map(f64::sqrt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    /// Search box in log10 coordinates, applied to every parameter.
    pub log10_lower: f64,
    pub log10_upper: f64,
    /// Weight of the quadratic penalty on the distance outside the box.
    pub bound_penalty: f64,
    /// Initial CMA-ES step size in decades.
    pub sigma0: f64,
    pub population: Option<usize>,
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub min_per_ring: usize,
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            log10_lower: -8.0,
            log10_upper: 1.0,
            bound_penalty: 1.0,
            sigma0: 1.0,
            population: None,
            max_evals: 3000,
            f_tol: 1e-18,
            x_tol: 1e-9,
            min_per_ring: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub mu_init: FrictionParams,
    pub mu_star: FrictionParams,
    pub objective_init: f64,
    pub objective_star: f64,
    pub rmse_init: f64,
    pub rmse_star: f64,
    pub optimizer: CmaEsResult,
}

/// Calibrates the reduced engine's friction against real transitions by
/// CMA-ES over log10 coordinates. Never returns parameters that fit worse
/// than `mu_init`.
pub fn estimate_parameters(
    data: &TransitionBuffer,
    mu_init: &FrictionParams,
    sim: &SimParams,
    config: &EstimationConfig,
) -> Result<EstimationReport> {
    if data.is_empty() {
        return Err(Error::Domain("no transitions to calibrate against".into()));
    }
    for (ring, n) in data.count_by_ring() {
        if n < config.min_per_ring {
            return Err(Error::Domain(format!(
                "ring {ring} has {n} transitions, calibration needs at least {}",
                config.min_per_ring
            )));
        }
    }
    mu_init.validate()?;
    let (lo, hi) = (config.log10_lower, config.log10_upper);
    if !(lo < hi) {
        return Err(Error::Config(format!(
            "empty log10 search box [{lo}, {hi}]"
        )));
    }
    let samples = data.as_slice();

    let to_mu = |z: &[f64]| {
        let mut v = [0.0; 4];
        for (out, zi) in v.iter_mut().zip(z) {
            *out = 10f64.powf(zi.clamp(lo, hi));
        }
        FrictionParams::from_array(v)
    };
    let objective = |z: &[f64]| {
        let excess: f64 = z.iter().map(|zi| (zi - zi.clamp(lo, hi)).powi(2)).sum();
        match friction_objective(samples, &to_mu(z), sim) {
            Ok(f) => f + config.bound_penalty * excess,
            Err(_) => f64::NAN,
        }
    };

    let x0: Vec<f64> = mu_init
        .to_array()
        .iter()
        .map(|m| {
            if *m > 0.0 {
                m.log10().clamp(lo, hi)
            } else {
                lo
            }
        })
        .collect();
    let cma = CmaEsConfig {
        population: config.population,
        sigma0: vec![config.sigma0; 4],
        max_evals: config.max_evals,
        f_tol: config.f_tol,
        x_tol: config.x_tol,
        seed: config.seed,
    };
    let optimizer = cma_es_minimize(objective, &x0, &cma)?;

    let objective_init = friction_objective(samples, mu_init, sim)?;
    let candidate = to_mu(&optimizer.x_best);
    let candidate_f = friction_objective(samples, &candidate, sim)?;
    let (mu_star, objective_star) = if candidate_f <= objective_init {
        (candidate, candidate_f)
    } else {
        (*mu_init, objective_init)
    };
    Ok(EstimationReport {
        mu_init: *mu_init,
        mu_star,
        objective_init,
        objective_star,
        rmse_init: objective_init.sqrt(),
        rmse_star: objective_star.sqrt(),
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::{Action, ReducedState};
    use crate::geometry::RingIndex;

    fn self_generated(mu: &FrictionParams, sim: &SimParams, per_ring: usize) -> TransitionBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buf = TransitionBuffer::new();
        for ring in 0..4 {
            let mut x = ReducedState::at_rest(RingIndex(ring), rng.gen_range(-3.0..3.0));
            for tick in 0..per_ring {
                let u = Action::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let next = step_reduced(&x, u, mu, CONTROL_DT, sim).unwrap();
                buf.push(Transition {
                    episode: ring,
                    tick,
                    x,
                    u,
                    next,
                });
                x = next;
            }
        }
        buf
    }

    #[test]
    fn objective_vanishes_on_self_generated_data() {
        let sim = SimParams::default();
        let mu = FrictionParams::REDUCED_DEFAULT;
        let d = self_generated(&mu, &sim, 20);
        assert_eq!(friction_objective(d.as_slice(), &mu, &sim).unwrap(), 0.0);
    }

    #[test]
    fn objective_is_order_invariant() {
        let sim = SimParams::default();
        let d = self_generated(&FrictionParams::FULL_DEFAULT, &sim, 15);
        let mu = FrictionParams::REDUCED_DEFAULT;
        let fwd = friction_objective(d.as_slice(), &mu, &sim).unwrap();
        let rev: Vec<Transition> = d.iter().rev().copied().collect();
        let back = friction_objective(&rev, &mu, &sim).unwrap();
        assert!((fwd - back).abs() <= 1e-15 * fwd.max(1.0));
        assert!(fwd > 0.0);
    }

    #[test]
    fn empty_data_is_a_domain_error() {
        let sim = SimParams::default();
        let mu = FrictionParams::REDUCED_DEFAULT;
        assert!(matches!(
            friction_objective(&[], &mu, &sim),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            estimate_parameters(
                &TransitionBuffer::new(),
                &mu,
                &sim,
                &EstimationConfig::default()
            ),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn too_few_transitions_per_ring_is_rejected() {
        let sim = SimParams::default();
        let d = self_generated(&FrictionParams::FULL_DEFAULT, &sim, 5);
        let err = estimate_parameters(
            &d,
            &FrictionParams::REDUCED_DEFAULT,
            &sim,
            &EstimationConfig::default(),
        );
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn self_calibration_recovers_fit_quality() {
        let sim = SimParams::default();
        let truth = FrictionParams {
            slide: 2e-2,
            spin: 1e-3,
            roll: 1e-6,
            floss: 1e-4,
        };
        let d = self_generated(&truth, &sim, 15);
        let report = estimate_parameters(
            &d,
            &FrictionParams::REDUCED_DEFAULT,
            &sim,
            &EstimationConfig::default(),
        )
        .unwrap();
        assert!(report.rmse_star < 1e-6, "rmse {}", report.rmse_star);
        assert!(report.objective_star <= report.objective_init);
    }
}
