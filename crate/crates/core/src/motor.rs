//! Servo actuation and the learned inverse motor model.
//!
//! The platform servos are position controlled with a first-order lag whose
//! settling time spans several control ticks. The inverse motor model is a
//! per-axis ARX(1,1) fit `angle[k+1] = a * angle[k] + b * command[k]` that
//! maps a desired next platform angle back to the command that reaches it.

use std::f64::consts::TAU;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Action;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServoParams {
    /// First-order time constant in seconds.
    pub tau: f64,
    pub max_tilt: f64,
    /// Slew cap in rad/s.
    pub rate_limit: f64,
}

impl Default for ServoParams {
    fn default() -> Self {
        ServoParams {
            tau: 0.05,
            max_tilt: 0.15,
            rate_limit: 4.0,
        }
    }
}

impl ServoParams {
    /// Actuation that reaches its target within the first integration substep.
    /// This is how the agent's internal physics engine sees the platform.
    pub fn ideal(max_tilt: f64) -> Self {
        ServoParams {
            tau: 1e-9,
            max_tilt,
            rate_limit: 1e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.rate_limit > 0.0 && self.max_tilt > 0.0) {
            return Err(Error::Config(format!("invalid servo parameters {self:?}")));
        }
        Ok(())
    }

    /// Exact one-tick ARX coefficients of the unsaturated lag.
    pub fn lag_arx(&self, dt: f64) -> ArxModel {
        let a = (-dt / self.tau).exp();
        let b = (1.0 - a) * self.max_tilt;
        ArxModel {
            a: [a, a],
            b: [b, b],
            max_tilt: self.max_tilt,
        }
    }
}

/// Advances the platform angles `(beta, gamma)` by `dt` towards the commanded
/// tilt.
pub fn servo_step(angles: (f64, f64), command: Action, dt: f64, servo: &ServoParams) -> (f64, f64) {
    let u = command.clamped();
    let gain = 1.0 - (-dt / servo.tau).exp();
    let max_delta = servo.rate_limit * dt;
    let axis = |angle: f64, cmd: f64| {
        let target = cmd * servo.max_tilt;
        let delta = (gain * (target - angle)).clamp(-max_delta, max_delta);
        (angle + delta).clamp(-servo.max_tilt, servo.max_tilt)
    };
    (axis(angles.0, u.ux), axis(angles.1, u.uy))
}

/// Platform driven at the control rate, integrated with `substeps` servo updates per tick.
#[derive(Clone, Copy, Debug)]
pub struct Platform {
    pub servo: ServoParams,
    pub dt: f64,
    pub substeps: usize,
}

impl Platform {
    pub fn advance(&self, mut angles: (f64, f64), command: Action) -> (f64, f64) {
        let h = self.dt / self.substeps as f64;
        for _ in 0..self.substeps {
            angles = servo_step(angles, command, h, &self.servo);
        }
        angles
    }
}

/// One logged excitation tick for both axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSample {
    pub t: f64,
    pub angle: [f64; 2],
    pub command: [f64; 2],
    pub next_angle: [f64; 2],
}

/// Sum-of-sinusoids excitation for one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub amplitudes: Vec<f64>,
    /// Hertz; must be below the Nyquist rate of the control loop.
    pub frequencies: Vec<f64>,
    pub duration: f64,
    pub seed: u64,
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation {
            amplitudes: vec![0.7, 0.5],
            frequencies: vec![0.3, 1.1],
            duration: 20.0,
            seed: 0,
        }
    }
}

/// Drives both platform axes with the excitation signal and logs
/// `(angle[k], command[k], angle[k+1])` triples at the control rate.
pub fn excite_and_collect(
    platform: &Platform,
    excitation: &Excitation,
) -> Result<Vec<ExcitationSample>> {
    let nyquist = 0.5 / platform.dt;
    if excitation.amplitudes.len() != excitation.frequencies.len() {
        return Err(Error::Domain(
            "amplitude and frequency lists differ in length".into(),
        ));
    }
    if let Some(f) = excitation
        .frequencies
        .iter()
        .find(|f| !(**f >= 0.0 && **f < nyquist))
    {
        return Err(Error::Domain(format!(
            "frequency {f} Hz is not below Nyquist ({nyquist} Hz)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(excitation.seed);
    // Independent phases per axis so the two axes are not collinear.
    let phases: Vec<[f64; 2]> = excitation
        .frequencies
        .iter()
        .map(|_| [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)])
        .collect();
    let ticks = (excitation.duration / platform.dt).round() as usize;
    let mut angles = (0.0, 0.0);
    let mut out = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let t = k as f64 * platform.dt;
        let mut cmd = [0.0; 2];
        for ((amp, f), ph) in excitation
            .amplitudes
            .iter()
            .zip(&excitation.frequencies)
            .zip(&phases)
        {
            for (axis, c) in cmd.iter_mut().enumerate() {
                *c += amp * (TAU * f * t + ph[axis]).sin();
            }
        }
        let command = Action::new(cmd[0], cmd[1]).clamped();
        let next = platform.advance(angles, command);
        out.push(ExcitationSample {
            t,
            angle: [angles.0, angles.1],
            command: [command.ux, command.uy],
            next_angle: [next.0, next.1],
        });
        angles = next;
    }
    Ok(out)
}

/// Per-axis first-order ARX model with commands normalized to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArxModel {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub max_tilt: f64,
}

impl ArxModel {
    pub fn predict(&self, current: (f64, f64), command: Action) -> (f64, f64) {
        (
            self.a[0] * current.0 + self.b[0] * command.ux,
            self.a[1] * current.1 + self.b[1] * command.uy,
        )
    }

    /// Unclamped command that reaches `desired` in one tick.
    pub fn invert_raw(&self, current: (f64, f64), desired: (f64, f64)) -> Result<Action> {
        if self.b.iter().any(|b| *b == 0.0 || !b.is_finite()) {
            return Err(Error::NotInvertible);
        }
        Ok(Action::new(
            (desired.0 - self.a[0] * current.0) / self.b[0],
            (desired.1 - self.a[1] * current.1) / self.b[1],
        ))
    }
}

/// Inverse motor model: the clamped servo command that best reaches the
/// desired next platform angles.
pub fn imm_invert(arx: &ArxModel, current: (f64, f64), desired: (f64, f64)) -> Result<Action> {
    Ok(arx.invert_raw(current, desired)?.clamped())
}

/// Least-squares fit of the per-axis ARX coefficients.
pub fn fit_arx(data: &[ExcitationSample], max_tilt: f64) -> Result<ArxModel> {
    if data.len() < 10 {
        return Err(Error::Fit(format!(
            "need at least 10 samples, got {}",
            data.len()
        )));
    }
    let mut a = [0.0; 2];
    let mut b = [0.0; 2];
    for axis in 0..2 {
        let mut gram = Matrix2::zeros();
        let mut rhs = Vector2::zeros();
        for s in data {
            let phi = Vector2::new(s.angle[axis], s.command[axis]);
            gram += phi * phi.transpose();
            rhs += phi * s.next_angle[axis];
        }
        let svd = gram.svd(true, true);
        let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
        if !(smin > 1e-12 * smax.max(f64::MIN_POSITIVE)) {
            let aa: f64 = data.iter().map(|s| s.angle[axis] * s.angle[axis]).sum();
            let ay: f64 = data
                .iter()
                .map(|s| s.angle[axis] * s.next_angle[axis])
                .sum();
            let a_only = if aa > 0.0 { ay / aa } else { f64::NAN };
            return Err(Error::ArxUnidentifiable { axis, a: a_only });
        }
        let coef = svd
            .solve(&rhs, 0.0)
            .map_err(|e| Error::Fit(format!("ARX least squares: {e}")))?;
        a[axis] = coef[0];
        b[axis] = coef[1];
    }
    let model = ArxModel { a, b, max_tilt };
    if model.a.iter().any(|a| a.abs() >= 1.0) {
        return Err(Error::Fit(format!(
            "fitted ARX model is unstable: a = {:?}",
            model.a
        )));
    }
    Ok(model)
}

/// Root-mean-square one-step prediction error of an ARX model per axis.
pub fn arx_rmse(model: &ArxModel, data: &[ExcitationSample]) -> [f64; 2] {
    let mut sse = [0.0; 2];
    for s in data {
        let pred = model.predict(
            (s.angle[0], s.angle[1]),
            Action::new(s.command[0], s.command[1]),
        );
        sse[0] += (pred.0 - s.next_angle[0]).powi(2);
        sse[1] += (pred.1 - s.next_angle[1]).powi(2);
    }
    let n = data.len().max(1) as f64;
    [(sse[0] / n).sqrt(), (sse[1] / n).sqrt()]
}
