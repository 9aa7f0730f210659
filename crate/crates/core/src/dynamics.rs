//! Marble physics: the full "real" model with radial and spin dynamics, and
//! the reduced angular-only engine the agent plans with.
//!
//! Both models integrate over `substeps` per control tick. The angular
//! motion uses kick-drift-kick (velocity Verlet) substeps with the friction
//! clamp applied in each half kick; the radial motion uses semi-implicit
//! Euler. The friction 4-vector plays the same roles in both:
//! `slide` is Coulomb friction, `roll` viscous rolling resistance, `spin`
//! the decay rate of marble spin, and `floss` a stiction threshold.
//!
//! Sign conventions: a positive `beta` tilts the +x edge down, a positive
//! `gamma` tilts the +y edge down, so in-plane gravity is
//! `g * (sin beta, sin gamma)`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap, MazeGeometry, RingIndex};
use crate::motor::{servo_step, ServoParams};

pub const GRAVITY: f64 = 9.81;
pub const CONTROL_DT: f64 = 1.0 / 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    /// Coulomb coefficient.
    pub slide: f64,
    /// Spin decay rate, 1/s.
    pub spin: f64,
    /// Rolling resistance, N·m·s/rad.
    pub roll: f64,
    /// Stiction threshold coefficient.
    pub floss: f64,
}

impl FrictionParams {
    /// Slippery settings used for the stand-in real system.
    pub const FULL_DEFAULT: FrictionParams = FrictionParams {
        slide: 1e-3,
        spin: 1e-6,
        roll: 1e-7,
        floss: 1e-6,
    };

    /// Stock engine settings the agent starts from.
    pub const REDUCED_DEFAULT: FrictionParams = FrictionParams {
        slide: 1.0,
        spin: 5e-3,
        roll: 1e-4,
        floss: 0.0,
    };

    pub fn from_array(v: [f64; 4]) -> Self {
        FrictionParams {
            slide: v[0],
            spin: v[1],
            roll: v[2],
            floss: v[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.slide, self.spin, self.roll, self.floss]
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .to_array()
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Domain(format!(
                "friction parameters must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Normalized platform command; `ux * max_tilt` is the target tilt about x.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub ux: f64,
    pub uy: f64,
}

impl Action {
    pub fn new(ux: f64, uy: f64) -> Self {
        Action { ux, uy }
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Action {
            ux: c(self.ux),
            uy: c(self.uy),
        }
    }

    pub fn is_clamped(&self) -> bool {
        self.ux.abs() <= 1.0 && self.uy.abs() <= 1.0
    }
}

/// What the agent can observe: platform tilts, marble angle and angular rate, ring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub ring: RingIndex,
}

impl ReducedState {
    pub fn at_rest(ring: RingIndex, theta: f64) -> Self {
        ReducedState {
            beta: 0.0,
            gamma: 0.0,
            theta: wrap(theta),
            theta_dot: 0.0,
            ring,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.beta, self.gamma, self.theta, self.theta_dot]
    }

    pub fn from_array(v: [f64; 4], ring: RingIndex) -> Self {
        ReducedState {
            beta: v[0],
            gamma: v[1],
            theta: v[2],
            theta_dot: v[3],
            ring,
        }
    }

    fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Hidden state of the stand-in real system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub ring: RingIndex,
    /// Radial position of the marble center (m).
    pub rho: f64,
    pub rho_dot: f64,
    /// Spin about the vertical axis (rad/s).
    pub spin: f64,
}

impl FullState {
    fn is_finite(&self) -> bool {
        [
            self.beta,
            self.gamma,
            self.theta,
            self.theta_dot,
            self.rho,
            self.rho_dot,
            self.spin,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn cartesian(&self) -> (f64, f64) {
        MazeGeometry::to_cartesian(self.rho, self.theta)
    }
}

/// Everything besides friction that both engines need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub geometry: MazeGeometry,
    pub servo: ServoParams,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Below this angular speed the stiction rule may freeze the marble.
    #[serde(default = "default_stiction_velocity")]
    pub stiction_velocity: f64,
    /// Coefficient of restitution for radial wall impacts (full model).
    #[serde(default = "default_wall_restitution")]
    pub wall_restitution: f64,
    /// Angular acceleration per unit of spin (full model).
    #[serde(default = "default_spin_coupling")]
    pub spin_coupling: f64,
}

fn default_substeps() -> usize {
    10
}
fn default_stiction_velocity() -> f64 {
    1e-3
}
fn default_wall_restitution() -> f64 {
    0.1
}
fn default_spin_coupling() -> f64 {
    0.01
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams::new(MazeGeometry::default(), ServoParams::default())
    }
}

impl SimParams {
    pub fn new(geometry: MazeGeometry, servo: ServoParams) -> Self {
        SimParams {
            geometry,
            servo,
            substeps: default_substeps(),
            stiction_velocity: default_stiction_velocity(),
            wall_restitution: default_wall_restitution(),
            spin_coupling: default_spin_coupling(),
        }
    }

    /// The same maze seen through an instantaneous actuator.
    pub fn with_ideal_servo(&self) -> Self {
        SimParams {
            servo: ServoParams::ideal(self.geometry.max_tilt),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.servo.validate()?;
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.wall_restitution) {
            return Err(Error::Config("wall_restitution must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Angular acceleration of a marble on a circle of radius `ring_radius`
/// due to platform tilt.
pub fn tangential_accel(beta: f64, gamma: f64, theta: f64, ring_radius: f64) -> Result<f64> {
    if !(ring_radius > 0.0) {
        return Err(Error::Domain(format!(
            "ring radius must be positive, got {ring_radius}"
        )));
    }
    Ok(tilt_accel(beta, gamma, theta, ring_radius))
}

#[inline]
fn tilt_accel(beta: f64, gamma: f64, theta: f64, radius: f64) -> f64 {
    GRAVITY / radius * (gamma.sin() * theta.cos() - beta.sin() * theta.sin())
}

/// Per-substep friction coefficients for a marble at `radius`.
struct Friction {
    coulomb: f64,
    viscous: f64,
    stiction: f64,
}

impl Friction {
    fn at(mu: &FrictionParams, mass: f64, radius: f64) -> Self {
        Friction {
            coulomb: GRAVITY * mu.slide / radius,
            viscous: mu.roll / (mass * radius * radius),
            stiction: mu.floss * GRAVITY / radius,
        }
    }
}

/// Semi-implicit velocity update with Coulomb friction. A moving marble
/// whose update would reverse it stops at zero partway through the step and
/// spends the remainder as a marble at rest, which stays there while the
/// drive does not exceed the Coulomb bound.
#[inline]
fn friction_velocity(v: f64, drive: f64, f: &Friction, h: f64, v_eps: f64) -> f64 {
    if v.abs() < v_eps && drive.abs() < f.stiction {
        return 0.0;
    }
    let from_rest = |h: f64| {
        if drive.abs() <= f.coulomb {
            0.0
        } else {
            h * (drive - f.coulomb * drive.signum())
        }
    };
    if v == 0.0 {
        return from_rest(h);
    }
    let accel = drive - f.viscous * v - f.coulomb * v.signum();
    let trial = v + h * accel;
    if trial * v < 0.0 {
        from_rest(h + v / accel)
    } else {
        trial
    }
}

/// One control tick of the reduced engine. The marble is pinned to the
/// center line of its ring and has no spin; the ring index is left alone.
pub fn step_reduced(
    x: &ReducedState,
    u: Action,
    mu: &FrictionParams,
    dt: f64,
    sim: &SimParams,
) -> Result<ReducedState> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if !x.is_finite() {
        return Err(Error::Integration(format!(
            "non-finite reduced state {x:?}"
        )));
    }
    let r = sim.geometry.ring_radius(x.ring)?;
    let u = u.clamped();
    let fr = Friction::at(mu, sim.geometry.marble_mass, r);
    let h = dt / sim.substeps as f64;
    let mut next = *x;
    let mut angles = (x.beta, x.gamma);
    let half = 0.5 * h;
    for _ in 0..sim.substeps {
        // kick with the tilt at the start of the substep, drift, then kick
        // with the tilt the servo has reached at its end
        let drive = tilt_accel(angles.0, angles.1, next.theta, r);
        next.theta_dot = friction_velocity(next.theta_dot, drive, &fr, half, sim.stiction_velocity);
        next.theta += h * next.theta_dot;
        angles = servo_step(angles, u, h, &sim.servo);
        let drive = tilt_accel(angles.0, angles.1, next.theta, r);
        next.theta_dot = friction_velocity(next.theta_dot, drive, &fr, half, sim.stiction_velocity);
    }
    next.beta = angles.0;
    next.gamma = angles.1;
    next.theta = wrap(next.theta);
    if !next.is_finite() {
        return Err(Error::Integration(format!(
            "reduced step diverged from {x:?}"
        )));
    }
    Ok(next)
}

/// One control tick of the full model: angular and radial marble motion,
/// wall contact, gate passage and spin. When the marble center clears the
/// wall below a gate the ring index advances.
pub fn step_full(
    x: &FullState,
    u: Action,
    mu: &FrictionParams,
    dt: f64,
    sim: &SimParams,
) -> Result<FullState> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    if !x.is_finite() {
        return Err(Error::Integration(format!("non-finite full state {x:?}")));
    }
    let geom = &sim.geometry;
    if geom.is_goal(x.ring) {
        return Ok(*x);
    }
    let u = u.clamped();
    let h = dt / sim.substeps as f64;
    let mass = geom.marble_mass;
    let play = geom.channel_half_width - geom.marble_radius;
    let last = geom.num_rings() - 1;
    let spin_decay = (-mu.spin * h).exp();
    let mut s = *x;
    let mut angles = (x.beta, x.gamma);
    let half = 0.5 * h;
    for _ in 0..sim.substeps {
        let r_ring = geom.ring_radii[s.ring.0];
        let radial_visc = mu.roll / (mass * r_ring * r_ring);
        // the Coriolis term is carried by conserving ρ²θ̇ whenever ρ changes
        let tangential = |angles: (f64, f64), s: &FullState| {
            tilt_accel(angles.0, angles.1, s.theta, s.rho.max(geom.marble_radius))
                + sim.spin_coupling * s.spin
        };
        let radial = |angles: (f64, f64), s: &FullState| {
            s.rho * s.theta_dot * s.theta_dot
                + GRAVITY * (angles.0.sin() * s.theta.cos() + angles.1.sin() * s.theta.sin())
                - radial_visc * s.rho_dot
        };

        // kick-drift-kick in both coordinates, as in the reduced engine
        let rho0 = s.rho.max(geom.marble_radius);
        let fr = Friction::at(mu, mass, rho0);
        let (at, ar) = (tangential(angles, &s), radial(angles, &s));
        s.theta_dot = friction_velocity(s.theta_dot, at, &fr, half, sim.stiction_velocity);
        s.rho_dot += half * ar;
        s.rho += h * s.rho_dot;
        let scale = (rho0 / s.rho.max(geom.marble_radius)).powi(2);
        s.theta += half * s.theta_dot * (1.0 + scale);
        s.theta_dot *= scale;
        s.spin *= spin_decay;
        angles = servo_step(angles, u, h, &sim.servo);
        let fr = Friction::at(mu, mass, s.rho.max(geom.marble_radius));
        let at = tangential(angles, &s);
        s.theta_dot = friction_velocity(s.theta_dot, at, &fr, half, sim.stiction_velocity);
        // the centrifugal term needs the end-of-step angular rate
        let accel = radial(angles, &s);
        s.rho_dot += half * accel;

        // walls and gates
        let rho_free = s.rho.max(geom.marble_radius);
        let hi = r_ring + play;
        let lo = r_ring - play;
        if s.rho > hi {
            wall_contact(&mut s, hi, accel, h, sim.wall_restitution);
        }
        let (floor, crossing) = if s.ring.0 < last {
            let inner = geom.ring_radii[s.ring.0 + 1];
            (inner - play, inner + play)
        } else {
            (0.0, r_ring - geom.channel_half_width - geom.marble_radius)
        };
        let inner_wall = if geom.in_gate(s.ring, s.theta) {
            floor
        } else {
            lo
        };
        if s.rho < inner_wall {
            wall_contact(&mut s, inner_wall, accel, h, sim.wall_restitution);
        }
        s.theta_dot *= (rho_free / s.rho.max(geom.marble_radius)).powi(2);
        if s.rho < crossing {
            s.ring = s.ring.next();
            if geom.is_goal(s.ring) {
                break;
            }
        }
    }
    s.beta = angles.0;
    s.gamma = angles.1;
    s.theta = wrap(s.theta);
    if !s.is_finite() {
        return Err(Error::Integration(format!("full step diverged from {x:?}")));
    }
    Ok(s)
}

/// Resolves a radial overshoot past the wall at `wall`. The overshoot is
/// reflected and scaled by the restitution, as if the impact happened inside
/// the substep. A rebound too slow to leave the wall against the pressing
/// acceleration `accel` within one substep becomes resting contact.
fn wall_contact(s: &mut FullState, wall: f64, accel: f64, h: f64, restitution: f64) {
    let over = s.rho - wall;
    let into = over.signum();
    if s.rho_dot * into <= 0.0 {
        s.rho = wall;
        return;
    }
    let rebound = restitution * s.rho_dot.abs();
    if rebound <= h * (accel * into).max(0.0) {
        s.rho = wall;
        s.rho_dot = 0.0;
    } else {
        s.rho = wall - restitution * over;
        s.rho_dot = -into * rebound;
    }
}

/// Projects the full state onto what the agent can observe.
pub fn observe(x: &FullState) -> ReducedState {
    ReducedState {
        beta: x.beta,
        gamma: x.gamma,
        theta: x.theta,
        theta_dot: x.theta_dot,
        ring: x.ring,
    }
}

/// Lifts a reduced state into the full model with the marble on the ring's
/// center line, no radial motion and no spin.
pub fn embed(x: &ReducedState, geom: &MazeGeometry) -> FullState {
    FullState {
        beta: x.beta,
        gamma: x.gamma,
        theta: x.theta,
        theta_dot: x.theta_dot,
        ring: x.ring,
        rho: geom.ring_radius(x.ring).unwrap_or(0.0),
        rho_dot: 0.0,
        spin: 0.0,
    }
}

/// Observation noise standard deviations for `(theta, theta_dot)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSigma {
    pub theta: f64,
    pub theta_dot: f64,
}

impl Default for NoiseSigma {
    fn default() -> Self {
        NoiseSigma {
            theta: 1e-3,
            theta_dot: 1e-2,
        }
    }
}

impl NoiseSigma {
    pub const ZERO: NoiseSigma = NoiseSigma {
        theta: 0.0,
        theta_dot: 0.0,
    };
}

/// Adds white Gaussian noise to the marble angle and rate.
pub fn inject_noise_with<R: Rng + ?Sized>(
    x: &ReducedState,
    sigma: &NoiseSigma,
    rng: &mut R,
) -> ReducedState {
    let mut out = *x;
    let n_theta: f64 = rng.sample(StandardNormal);
    let n_rate: f64 = rng.sample(StandardNormal);
    if sigma.theta > 0.0 {
        out.theta = wrap(out.theta + sigma.theta * n_theta);
    }
    out.theta_dot += sigma.theta_dot * n_rate;
    out
}

pub fn inject_noise(x: &ReducedState, sigma: &NoiseSigma, seed: u64) -> ReducedState {
    inject_noise_with(x, sigma, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mechanical energy proxy of the reduced model: kinetic energy on the ring
/// plus potential energy in the tilt field.
pub fn energy_proxy(x: &ReducedState, geom: &MazeGeometry) -> Result<f64> {
    let r = geom.ring_radius(x.ring)?;
    let m = geom.marble_mass;
    let kinetic = 0.5 * m * r * r * x.theta_dot * x.theta_dot;
    let potential =
        -m * GRAVITY * r * (x.beta.sin() * x.theta.cos() + x.gamma.sin() * x.theta.sin());
    Ok(kinetic + potential)
}

/// One row of an exported trajectory. Columns, in order:
/// `t, beta, gamma, theta, theta_dot, ring, rho, rho_dot, spin`; the last
/// three are empty for reduced-model trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub ring: usize,
    pub rho: Option<f64>,
    pub rho_dot: Option<f64>,
    pub spin: Option<f64>,
}

impl TrajectoryRow {
    pub fn reduced(t: f64, x: &ReducedState) -> Self {
        TrajectoryRow {
            t,
            beta: x.beta,
            gamma: x.gamma,
            theta: x.theta,
            theta_dot: x.theta_dot,
            ring: x.ring.0,
            rho: None,
            rho_dot: None,
            spin: None,
        }
    }

    pub fn full(t: f64, x: &FullState) -> Self {
        TrajectoryRow {
            rho: Some(x.rho),
            rho_dot: Some(x.rho_dot),
            spin: Some(x.spin),
            ..TrajectoryRow::reduced(t, &observe(x))
        }
    }
}

/// Writes trajectory rows as CSV with a header line.
pub fn write_trajectory<W: Write>(out: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<trajectory>", e))?;
    Ok(())
}

pub fn save_trajectory(path: impl AsRef<Path>, rows: &[TrajectoryRow]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    write_trajectory(std::io::BufWriter::new(file), rows)
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sim() -> SimParams {
        SimParams::default()
    }

    fn rest(theta: f64) -> ReducedState {
        ReducedState::at_rest(RingIndex(0), theta)
    }

    /// Fine-step reference integrator of the reduced angular ODE with the
    /// platform held fixed, handling the Coulomb discontinuity by
    /// event-free sticking at zero velocity.
    fn reference_theta(
        x: &ReducedState,
        mu: &FrictionParams,
        r: f64,
        mass: f64,
        t_end: f64,
        h: f64,
    ) -> (f64, f64) {
        let (mut th, mut w) = (x.theta, x.theta_dot);
        let c = GRAVITY * mu.slide / r;
        let visc = mu.roll / (mass * r * r);
        let steps = (t_end / h).round() as usize;
        for _ in 0..steps {
            let a = GRAVITY / r * (x.gamma.sin() * th.cos() - x.beta.sin() * th.sin());
            if w == 0.0 && a.abs() <= c {
                continue;
            }
            let fric = if w != 0.0 {
                c * w.signum()
            } else {
                c * a.signum()
            };
            let nw = w + h * (a - visc * w - fric);
            w = if w != 0.0 && nw * w < 0.0 { 0.0 } else { nw };
            th += h * w;
        }
        (th, w)
    }

    #[test]
    fn tangential_accel_examples() {
        assert_eq!(tangential_accel(0.0, 0.0, 1.3, 0.1).unwrap(), 0.0);
        let a = tangential_accel(0.0, 0.1, 0.0, 0.1).unwrap();
        assert!((a - 9.81 * 0.1f64.sin() / 0.1).abs() < 1e-12);
        assert!((a - 9.7937).abs() < 1e-4);
        assert!(tangential_accel(0.1, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn tangential_accel_is_potential_gradient() {
        let geom = MazeGeometry::default();
        let (m, r) = (geom.marble_mass, geom.ring_radii[0]);
        for &(b, g, th) in &[(0.05, -0.03, 0.7), (-0.1, 0.02, -2.5), (0.12, 0.12, 3.0)] {
            let potential =
                |th: f64| -m * GRAVITY * r * (f64::sin(b) * th.cos() + f64::sin(g) * th.sin());
            let h = 1e-6;
            let grad = (potential(th + h) - potential(th - h)) / (2.0 * h);
            let expected = -grad / (m * r * r);
            let a = tangential_accel(b, g, th, r).unwrap();
            assert!(
                (a - expected).abs() < 1e-6 * a.abs().max(1.0),
                "{a} vs {expected}"
            );
        }
    }

    #[test]
    fn reduced_flat_rest_is_equilibrium() {
        let x = rest(0.4);
        let y = step_reduced(
            &x,
            Action::default(),
            &FrictionParams::REDUCED_DEFAULT,
            CONTROL_DT,
            &sim(),
        )
        .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn frictionless_coasting() {
        let zero = FrictionParams::from_array([0.0; 4]);
        let x = ReducedState {
            theta_dot: 1.0,
            ..rest(0.0)
        };
        let y = step_reduced(&x, Action::default(), &zero, CONTROL_DT, &sim()).unwrap();
        assert!((y.theta - CONTROL_DT).abs() < 1e-14);
        assert_eq!(y.theta_dot, 1.0);
    }

    #[test]
    fn reduced_step_matches_fine_reference() {
        let mu = FrictionParams::REDUCED_DEFAULT;
        let geom = MazeGeometry::default();
        let ideal = sim().with_ideal_servo();
        let x = ReducedState {
            gamma: 0.05,
            ..rest(0.0)
        };
        let hold = Action::new(0.0, 0.05 / geom.max_tilt);
        let y = step_reduced(&x, hold, &mu, CONTROL_DT, &ideal).unwrap();
        let (th, _) = reference_theta(
            &x,
            &mu,
            geom.ring_radii[0],
            geom.marble_mass,
            CONTROL_DT,
            1e-5,
        );
        assert!((y.theta - th).abs() < 1e-4, "{} vs {}", y.theta, th);

        // and with slippery friction, where the marble actually moves
        let mu = FrictionParams::FULL_DEFAULT;
        let y = step_reduced(&x, hold, &mu, CONTROL_DT, &ideal).unwrap();
        let (th, w) = reference_theta(
            &x,
            &mu,
            geom.ring_radii[0],
            geom.marble_mass,
            CONTROL_DT,
            1e-5,
        );
        assert!(y.theta > 1e-3);
        assert!((y.theta - th).abs() < 1e-4, "{} vs {}", y.theta, th);
        assert!((y.theta_dot - w).abs() < 1e-2);
    }

    #[test]
    fn full_flat_center_is_equilibrium() {
        let s = sim();
        let x = embed(&rest(1.0), &s.geometry);
        let y = step_full(
            &x,
            Action::default(),
            &FrictionParams::FULL_DEFAULT,
            CONTROL_DT,
            &s,
        )
        .unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn full_spin_decays_exponentially() {
        let s = sim();
        let mu = FrictionParams {
            spin: 1e-6,
            ..FrictionParams::FULL_DEFAULT
        };
        let x = FullState {
            spin: 1.0,
            ..embed(&rest(0.0), &s.geometry)
        };
        let y = step_full(&x, Action::default(), &mu, CONTROL_DT, &s).unwrap();
        assert!((y.spin - (-1e-6 * CONTROL_DT).exp()).abs() < 1e-14);
    }

    #[test]
    fn full_wall_contact_keeps_marble_in_channel() {
        let s = sim();
        let (lo, hi) = s.geometry.channel_bounds(RingIndex(0)).unwrap();
        // away from the gates at 0 and pi
        let base = embed(&rest(1.2), &s.geometry);
        for rho_dot in [-0.5, -0.05, 0.3] {
            let x = FullState {
                rho: hi,
                rho_dot,
                ..base
            };
            let y = step_full(
                &x,
                Action::new(0.7, -0.4),
                &FrictionParams::FULL_DEFAULT,
                CONTROL_DT,
                &s,
            )
            .unwrap();
            assert!(y.rho >= lo - 1e-15 && y.rho <= hi + 1e-15, "rho {}", y.rho);
            assert_eq!(y.ring, RingIndex(0));
        }
    }

    #[test]
    fn full_model_passes_through_open_gate() {
        let s = sim();
        let x = embed(&rest(0.0), &s.geometry);
        let inward = Action::new(-0.6, 0.0);
        let mut y = x;
        for _ in 0..15 {
            y = step_full(&y, inward, &FrictionParams::FULL_DEFAULT, CONTROL_DT, &s).unwrap();
        }
        assert_eq!(y.ring, RingIndex(1));
        // same push away from any gate only presses against the wall
        let x = embed(&rest(PI_2), &s.geometry);
        let mut y = x;
        let inward = Action::new(0.0, -0.6);
        for _ in 0..15 {
            y = step_full(&y, inward, &FrictionParams::FULL_DEFAULT, CONTROL_DT, &s).unwrap();
        }
        assert_eq!(y.ring, RingIndex(0));
    }

    const PI_2: f64 = std::f64::consts::FRAC_PI_2;

    #[test]
    fn observe_is_a_projection() {
        let s = sim();
        let r = ReducedState {
            beta: 0.01,
            gamma: -0.02,
            theta: 0.3,
            theta_dot: -1.0,
            ring: RingIndex(2),
        };
        let full = FullState {
            spin: 5.0,
            rho: 0.061,
            ..embed(&r, &s.geometry)
        };
        assert_eq!(observe(&full), r);
        assert_eq!(observe(&embed(&r, &s.geometry)), r);
        let other = FullState { rho: 0.058, ..full };
        assert_eq!(observe(&full), observe(&other));
    }

    #[test]
    fn noise_examples() {
        let x = ReducedState {
            theta_dot: 0.5,
            ..rest(0.2)
        };
        assert_eq!(inject_noise(&x, &NoiseSigma::ZERO, 9), x);
        let sigma = NoiseSigma::default();
        assert_eq!(inject_noise(&x, &sigma, 11), inject_noise(&x, &sigma, 11));
        assert_ne!(inject_noise(&x, &sigma, 11), inject_noise(&x, &sigma, 12));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let sigma = NoiseSigma {
            theta: 0.01,
            theta_dot: 0.1,
        };
        let base = rest(0.0);
        let (mut s_th, mut s_w) = (0.0, 0.0);
        for _ in 0..n {
            let y = inject_noise_with(&base, &sigma, &mut rng);
            s_th += y.theta;
            s_w += y.theta_dot;
        }
        let bound = |sd: f64| 3.0 * sd / (n as f64).sqrt();
        assert!((s_th / n as f64).abs() < bound(0.01));
        assert!((s_w / n as f64).abs() < bound(0.1));
    }

    #[test]
    fn stiction_holds_marble_at_rest() {
        let s = sim();
        let mu = FrictionParams {
            slide: 0.0,
            spin: 0.0,
            roll: 0.0,
            floss: 0.05,
        };
        let r = s.geometry.ring_radii[0];
        // tilt whose tangential pull is below floss * g / r
        let gamma: f64 = 0.03;
        assert!(GRAVITY * gamma.sin() / r < mu.floss * GRAVITY / r);
        let mut x = ReducedState { gamma, ..rest(0.0) };
        let hold = Action::new(0.0, gamma / s.geometry.max_tilt);
        for _ in 0..1000 {
            x = step_reduced(&x, hold, &mu, CONTROL_DT, &s).unwrap();
            assert_eq!(x.theta, 0.0);
            assert_eq!(x.theta_dot, 0.0);
        }
    }

    #[test]
    fn substep_refinement_converges() {
        let geom = MazeGeometry::default();
        let coarse = SimParams::default();
        let fine = SimParams {
            substeps: 20,
            ..SimParams::default()
        };
        let mu = FrictionParams::FULL_DEFAULT;
        let mut a = ReducedState {
            theta_dot: 0.5,
            ..rest(0.3)
        };
        let mut b = a;
        for k in 0..30 {
            let u = Action::new(0.3 * (k as f64 * 0.3).sin(), 0.5);
            a = step_reduced(&a, u, &mu, CONTROL_DT, &coarse).unwrap();
            b = step_reduced(&b, u, &mu, CONTROL_DT, &fine).unwrap();
        }
        assert!(
            wrap(a.theta - b.theta).abs() < 1e-3,
            "{} vs {}",
            a.theta,
            b.theta
        );
        let _ = geom;
    }

    #[test]
    fn goal_ring_has_no_reduced_dynamics() {
        let x = ReducedState::at_rest(RingIndex(4), 0.0);
        assert!(step_reduced(
            &x,
            Action::default(),
            &FrictionParams::FULL_DEFAULT,
            CONTROL_DT,
            &sim()
        )
        .is_err());
        let bad = ReducedState {
            theta_dot: f64::NAN,
            ..rest(0.0)
        };
        assert!(matches!(
            step_reduced(
                &bad,
                Action::default(),
                &FrictionParams::FULL_DEFAULT,
                CONTROL_DT,
                &sim()
            ),
            Err(Error::Integration(_))
        ));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let s = sim();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let rows = vec![
            TrajectoryRow::full(0.0, &embed(&rest(0.1), &s.geometry)),
            TrajectoryRow::reduced(CONTROL_DT, &rest(0.2)),
        ];
        save_trajectory(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,beta,gamma,theta,theta_dot,ring,rho,rho_dot,spin\n"));
        assert_eq!(read_trajectory(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn tangential_accel_is_odd(b in -0.3f64..0.3, g in -0.3f64..0.3, th in -3.1f64..3.1, r in 0.01f64..0.2) {
            let a = tangential_accel(b, g, th, r).unwrap();
            let m = tangential_accel(-b, -g, th, r).unwrap();
            prop_assert!((a + m).abs() < 1e-12);
        }

        #[test]
        fn passive_energy_never_increases(
            th in -3.1f64..3.1, w in -5.0f64..5.0,
            b in -0.15f64..0.15, g in -0.15f64..0.15,
            ring in 0usize..4,
            slide in 1e-4f64..0.5, roll in 1e-8f64..1e-4,
        ) {
            let s = SimParams::default();
            let mu = FrictionParams { slide, spin: 1e-3, roll, floss: 0.0 };
            let mut x = ReducedState { beta: b, gamma: g, theta: th, theta_dot: w, ring: RingIndex(ring) };
            // let the platform settle to level
            while x.beta.abs() > 1e-14 || x.gamma.abs() > 1e-14 {
                x = step_reduced(&x, Action::default(), &mu, CONTROL_DT, &s).unwrap();
            }
            let mut e = energy_proxy(&x, &s.geometry).unwrap();
            for _ in 0..1000 {
                x = step_reduced(&x, Action::default(), &mu, CONTROL_DT, &s).unwrap();
                let e2 = energy_proxy(&x, &s.geometry).unwrap();
                prop_assert!(e2 <= e + 1e-15);
                e = e2;
            }
        }

        #[test]
        fn full_steps_are_deterministic(th in -3.1f64..3.1, ux in -1.0f64..1.0, uy in -1.0f64..1.0) {
            let s = SimParams::default();
            let x = FullState { spin: 0.5, rho_dot: 0.01, ..embed(&rest(th), &s.geometry) };
            let a = step_full(&x, Action::new(ux, uy), &FrictionParams::FULL_DEFAULT, CONTROL_DT, &s).unwrap();
            let b = step_full(&x, Action::new(ux, uy), &FrictionParams::FULL_DEFAULT, CONTROL_DT, &s).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
