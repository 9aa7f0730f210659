use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{step_reduced, Action, FrictionParams, ReducedState, SimParams, CONTROL_DT};
use crate::error::{Error, Result};
use crate::estimation::{Transition, TransitionBuffer};
use crate::geometry::{wrap, RingIndex};

use super::gp::{gp_fit, GpFitConfig, GpInput, GpModel};

pub fn gp_input(x: &ReducedState, u: Action) -> GpInput {
    [x.beta, x.gamma, x.theta, x.theta_dot, u.ux, u.uy]
}

/// Residual heads for one ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingHeads {
    pub theta: GpModel,
    pub theta_dot: GpModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualConfig {
    pub gp: GpFitConfig,
    /// Rings with fewer transitions keep the bare engine.
    pub min_samples: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            gp: GpFitConfig::default(),
            min_samples: 2,
        }
    }
}

/// Reduced engine with calibrated friction plus per-ring GP corrections of
/// the predicted angle and angular rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub mu: FrictionParams,
    pub sim: SimParams,
    /// One entry per ring; `None` means the ring runs on the engine alone.
    pub rings: Vec<Option<RingHeads>>,
    /// Training transitions seen per ring.
    pub samples: Vec<usize>,
}

impl HybridModel {
    pub fn engine_only(mu: FrictionParams, sim: SimParams) -> Self {
        let n = sim.geometry.num_rings();
        HybridModel {
            mu,
            sim,
            rings: vec![None; n],
            samples: vec![0; n],
        }
    }

    pub fn has_residual(&self, ring: RingIndex) -> bool {
        matches!(self.rings.get(ring.0), Some(Some(_)))
    }

    /// GP mean corrections `(Δθ, Δθ̇)`; zero where no heads were fitted.
    pub fn correction(&self, x: &ReducedState, u: Action) -> (f64, f64) {
        match self.rings.get(x.ring.0) {
            Some(Some(h)) => {
                let q = gp_input(x, u.clamped());
                (h.theta.mean(&q), h.theta_dot.mean(&q))
            }
            _ => (0.0, 0.0),
        }
    }

    pub fn engine_step(&self, x: &ReducedState, u: Action) -> Result<ReducedState> {
        step_reduced(x, u, &self.mu, CONTROL_DT, &self.sim)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One control tick of the hybrid model.
pub fn hybrid_step(model: &HybridModel, x: &ReducedState, u: Action) -> Result<ReducedState> {
    let mut next = model.engine_step(x, u)?;
    let (dth, dw) = model.correction(x, u);
    next.theta = wrap(next.theta + dth);
    next.theta_dot += dw;
    Ok(next)
}

/// Teacher-forced residual targets `(wrap(θ' − θ_sim'), θ̇' − θ̇_sim')`.
fn residual_targets(t: &Transition, mu: &FrictionParams, sim: &SimParams) -> Result<(f64, f64)> {
    let pred = step_reduced(&t.x, t.u, mu, CONTROL_DT, sim)?;
    Ok((
        wrap(t.next.theta - pred.theta),
        t.next.theta_dot - pred.theta_dot,
    ))
}

/// Fits per-ring GP residual heads on `data` against the engine with
/// friction `mu`.
pub fn fit_residual(
    data: &TransitionBuffer,
    mu: &FrictionParams,
    sim: &SimParams,
    config: &ResidualConfig,
) -> Result<HybridModel> {
    if data.is_empty() {
        return Err(Error::Domain(
            "no transitions to learn a residual from".into(),
        ));
    }
    let mut model = HybridModel::engine_only(*mu, sim.clone());
    for (ring, transitions) in data.by_ring() {
        if ring.0 >= model.rings.len() {
            continue;
        }
        model.samples[ring.0] = transitions.len();
        if transitions.len() < config.min_samples.max(2) {
            continue;
        }
        let mut inputs = Vec::with_capacity(transitions.len());
        let mut t_theta = Vec::with_capacity(transitions.len());
        let mut t_rate = Vec::with_capacity(transitions.len());
        for t in &transitions {
            let (a, b) = residual_targets(t, mu, sim)?;
            inputs.push(gp_input(&t.x, t.u.clamped()));
            t_theta.push(a);
            t_rate.push(b);
        }
        model.rings[ring.0] = Some(RingHeads {
            theta: gp_fit(&inputs, &t_theta, &config.gp)?,
            theta_dot: gp_fit(&inputs, &t_rate, &config.gp)?,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::{embed, observe, step_full};

    fn engine_data(mu: &FrictionParams, sim: &SimParams, n: usize) -> TransitionBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut buf = TransitionBuffer::new();
        let mut x = ReducedState::at_rest(RingIndex(1), 0.4);
        for tick in 0..n {
            let u = Action::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let next = step_reduced(&x, u, mu, CONTROL_DT, sim).unwrap();
            buf.push(Transition {
                episode: 0,
                tick,
                x,
                u,
                next,
            });
            x = next;
        }
        buf
    }

    #[test]
    fn zero_residual_model_equals_engine() {
        let sim = SimParams::default();
        let mu = FrictionParams::FULL_DEFAULT;
        let model = HybridModel::engine_only(mu, sim.clone());
        let x = ReducedState {
            theta_dot: 0.4,
            ..ReducedState::at_rest(RingIndex(2), 1.0)
        };
        let u = Action::new(0.3, -0.2);
        assert_eq!(
            hybrid_step(&model, &x, u).unwrap(),
            step_reduced(&x, u, &mu, CONTROL_DT, &sim).unwrap()
        );
    }

    #[test]
    fn self_generated_data_leaves_engine_untouched() {
        let sim = SimParams::default();
        let mu = FrictionParams::FULL_DEFAULT;
        let d = engine_data(&mu, &sim, 80);
        let model = fit_residual(&d, &mu, &sim, &ResidualConfig::default()).unwrap();
        assert!(model.has_residual(RingIndex(1)));
        assert!(!model.has_residual(RingIndex(0)));
        for t in d.iter() {
            let (a, b) = model.correction(&t.x, t.u);
            assert!(a.abs() < 1e-6 && b.abs() < 1e-6);
        }
    }

    #[test]
    fn sparse_rings_fall_back_to_engine() {
        let sim = SimParams::default();
        let mu = FrictionParams::FULL_DEFAULT;
        let d = engine_data(&mu, &sim, 1);
        let model = fit_residual(&d, &mu, &sim, &ResidualConfig::default()).unwrap();
        assert_eq!(model.samples[1], 1);
        assert!(model.rings.iter().all(Option::is_none));
        assert!(fit_residual(
            &TransitionBuffer::new(),
            &mu,
            &sim,
            &ResidualConfig::default()
        )
        .is_err());
    }

    #[test]
    fn seam_crossing_targets_are_wrapped() {
        let sim = SimParams::default();
        let mu = FrictionParams::FULL_DEFAULT;
        let x = ReducedState {
            theta_dot: 3.0,
            ..ReducedState::at_rest(RingIndex(0), std::f64::consts::PI - 0.05)
        };
        let mut next = step_reduced(&x, Action::default(), &mu, CONTROL_DT, &sim).unwrap();
        assert!(next.theta < 0.0, "the step should cross the seam");
        next.theta = wrap(next.theta + 0.01);
        let t = Transition {
            episode: 0,
            tick: 0,
            x,
            u: Action::default(),
            next,
        };
        let (a, _) = residual_targets(&t, &mu, &sim).unwrap();
        assert!((a - 0.01).abs() < 1e-12);
    }

    #[test]
    fn hybrid_corrections_are_affine_in_features() {
        let sim = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // real data from the full model so the residual is nontrivial
        let mu_full = FrictionParams::FULL_DEFAULT;
        let mut s = embed(&ReducedState::at_rest(RingIndex(0), 0.0), &sim.geometry);
        s.spin = 3.0;
        let mut d = TransitionBuffer::new();
        for tick in 0..120 {
            let u = Action::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = step_full(&s, u, &mu_full, CONTROL_DT, &sim).unwrap();
            if n.ring == s.ring {
                d.push(Transition {
                    episode: 0,
                    tick,
                    x: observe(&s),
                    u,
                    next: observe(&n),
                });
            }
            s = n;
        }
        let model = fit_residual(&d, &mu_full, &sim, &ResidualConfig::default()).unwrap();
        let heads = model.rings[0].as_ref().unwrap();
        let x = [0.01, -0.02, 0.7, 0.5, 0.2, -0.1];
        let base = heads.theta.mean(&x);
        let mut y = x;
        y[0] += 1e-8;
        let lipschitz: f64 = heads.theta.weight_mean.iter().map(|w| w.abs()).sum::<f64>()
            * heads.theta.target_std
            / heads
                .theta
                .feature_std
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
        assert!((heads.theta.mean(&y) - base).abs() <= 1e-8 * lipschitz + 1e-15);
    }
}
