//! Maze layout and the discrete gate planner.
//!
//! The maze is a stack of concentric annular channels. Ring 0 is the
//! outermost channel; the ring index one past the innermost channel is the
//! goal (the center). Each channel's inner wall has one or more gates that
//! lead to the next ring inward.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::Domain(format!(
            "cannot wrap non-finite angle {theta}"
        )));
    }
    Ok(wrap(theta))
}

/// Infallible variant for hot loops where finiteness is already guaranteed.
#[inline]
pub(crate) fn wrap(theta: f64) -> f64 {
    let r = (theta + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Index of a ring channel. `0` is the outermost ring; the goal (center) is
/// `MazeGeometry::goal_ring()`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RingIndex(pub usize);

impl RingIndex {
    pub const OUTER: RingIndex = RingIndex(0);

    pub fn next(self) -> RingIndex {
        RingIndex(self.0 + 1)
    }

    /// One-based label used in reports ("Ring 1" is the outermost ring).
    pub fn label(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for RingIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ring {}", self.0)
    }
}

/// Physical layout of the circular maze. SI units throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeGeometry {
    /// Channel center-line radii, outermost first.
    pub ring_radii: Vec<f64>,
    pub channel_half_width: f64,
    /// Gate angles on the inner wall of each ring.
    pub gates: Vec<Vec<f64>>,
    /// Half of the gate opening, measured as arc length on the channel center line.
    #[serde(default = "default_gate_half_width")]
    pub gate_half_width: f64,
    pub marble_radius: f64,
    pub marble_mass: f64,
    /// Platform tilt limit in radians.
    pub max_tilt: f64,
}

fn default_gate_half_width() -> f64 {
    0.008
}

impl Default for MazeGeometry {
    fn default() -> Self {
        let half_pi = PI / 2.0;
        MazeGeometry {
            ring_radii: vec![0.10, 0.08, 0.06, 0.04],
            channel_half_width: 0.008,
            gates: vec![
                vec![0.0, PI],
                vec![half_pi, -half_pi],
                vec![0.0, PI],
                vec![half_pi, -half_pi],
            ],
            gate_half_width: default_gate_half_width(),
            marble_radius: 0.004,
            marble_mass: 0.003,
            max_tilt: 0.15,
        }
    }
}

impl MazeGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.ring_radii.is_empty() {
            return bad("ring_radii must not be empty".into());
        }
        if self.ring_radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad(format!(
                "ring radii must be positive: {:?}",
                self.ring_radii
            ));
        }
        if self.ring_radii.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!(
                "ring radii must be strictly decreasing: {:?}",
                self.ring_radii
            ));
        }
        if self.gates.len() != self.ring_radii.len() {
            return bad(format!(
                "expected gate lists for {} rings, got {}",
                self.ring_radii.len(),
                self.gates.len()
            ));
        }
        for (i, gates) in self.gates.iter().enumerate() {
            if gates.is_empty() {
                return bad(format!("ring {i} has no gate"));
            }
            if let Some(g) = gates
                .iter()
                .find(|g| !(g.is_finite() && **g > -PI && **g <= PI))
            {
                return bad(format!("gate angle {g} of ring {i} is outside (-pi, pi]"));
            }
        }
        if !(self.channel_half_width > self.marble_radius && self.marble_radius > 0.0) {
            return bad("channel_half_width must exceed marble_radius > 0".into());
        }
        let innermost = *self.ring_radii.last().expect("non-empty");
        if innermost <= self.channel_half_width + self.marble_radius {
            return bad("innermost channel overlaps the center".into());
        }
        for w in self.ring_radii.windows(2) {
            if w[0] - w[1] < 2.0 * self.channel_half_width {
                return bad(format!("channels at radii {} and {} overlap", w[0], w[1]));
            }
        }
        if !(self.gate_half_width > 0.0) {
            return bad("gate_half_width must be positive".into());
        }
        if !(self.marble_mass > 0.0) {
            return bad("marble_mass must be positive".into());
        }
        if !(self.max_tilt > 0.0 && self.max_tilt < PI / 2.0) {
            return bad("max_tilt must lie in (0, pi/2)".into());
        }
        Ok(())
    }

    /// Loads a geometry from a TOML file and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let geom: MazeGeometry = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        geom.validate()?;
        Ok(geom)
    }

    pub fn num_rings(&self) -> usize {
        self.ring_radii.len()
    }

    pub fn goal_ring(&self) -> RingIndex {
        RingIndex(self.ring_radii.len())
    }

    pub fn is_goal(&self, ring: RingIndex) -> bool {
        ring.0 >= self.ring_radii.len()
    }

    pub fn ring_radius(&self, ring: RingIndex) -> Result<f64> {
        self.ring_radii
            .get(ring.0)
            .copied()
            .ok_or_else(|| Error::Domain(format!("{ring} has no channel")))
    }

    /// Gate opening half-angle for a ring.
    pub fn gate_half_angle(&self, ring: RingIndex) -> Result<f64> {
        Ok(self.gate_half_width / self.ring_radius(ring)?)
    }

    /// Radial limits of the marble center while it is inside a ring's channel.
    pub fn channel_bounds(&self, ring: RingIndex) -> Result<(f64, f64)> {
        let r = self.ring_radius(ring)?;
        let play = self.channel_half_width - self.marble_radius;
        Ok((r - play, r + play))
    }

    /// Is `theta` inside one of the ring's gate openings?
    pub fn in_gate(&self, ring: RingIndex, theta: f64) -> bool {
        match (self.gates.get(ring.0), self.gate_half_angle(ring)) {
            (Some(gates), Ok(half)) => gates.iter().any(|g| wrap(g - theta).abs() < half),
            _ => false,
        }
    }

    /// Gate angle of `ring` nearest to `theta`. Exact ties go to the gate
    /// reached by moving counterclockwise (positive wrapped difference).
    pub fn nearest_gate(&self, ring: RingIndex, theta: f64) -> Result<f64> {
        if self.is_goal(ring) {
            return Err(Error::NoGate(ring.0));
        }
        let theta = wrap_angle(theta)?;
        let gates = &self.gates[ring.0];
        let mut best = gates[0];
        let mut best_d = wrap(best - theta);
        for &g in &gates[1..] {
            let d = wrap(g - theta);
            let closer = d.abs() < best_d.abs() - 1e-12;
            let tie = (d.abs() - best_d.abs()).abs() <= 1e-12;
            if closer || (tie && d > 0.0 && best_d <= 0.0) {
                best = g;
                best_d = d;
            }
        }
        Ok(best)
    }

    /// Greedy gate chain from `start_ring` to the goal: nearest gate of the
    /// current ring, then the next ring's gate nearest to that gate, and so on.
    pub fn plan_gate_sequence(
        &self,
        start_ring: RingIndex,
        theta: f64,
    ) -> Result<Vec<(RingIndex, f64)>> {
        let mut plan = Vec::with_capacity(self.num_rings().saturating_sub(start_ring.0));
        let mut ring = start_ring;
        let mut at = theta;
        while !self.is_goal(ring) {
            let gate = self.nearest_gate(ring, at)?;
            plan.push((ring, gate));
            at = gate;
            ring = ring.next();
        }
        if plan.is_empty() {
            return Err(Error::NoGate(start_ring.0));
        }
        Ok(plan)
    }

    /// Cartesian position of a marble at polar `(rho, theta)`.
    pub fn to_cartesian(rho: f64, theta: f64) -> (f64, f64) {
        (rho * theta.cos(), rho * theta.sin())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_gate(gates: Vec<f64>) -> MazeGeometry {
        MazeGeometry {
            gates: vec![gates.clone(), gates.clone(), gates.clone(), gates],
            ..MazeGeometry::default()
        }
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!((wrap_angle(3.0 * PI).unwrap() - PI).abs() < 1e-12);
        assert!((wrap_angle(-3.5 * PI).unwrap() - 0.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_angle(PI).unwrap(), PI);
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert!(matches!(wrap_angle(f64::NAN), Err(Error::Domain(_))));
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn nearest_gate_examples() {
        let g = two_gate(vec![0.0, PI]);
        assert_eq!(g.nearest_gate(RingIndex(0), 0.1).unwrap(), 0.0);
        // equidistant: counterclockwise gate wins
        assert_eq!(g.nearest_gate(RingIndex(0), PI / 2.0).unwrap(), PI);
        let g = two_gate(vec![-3.0]);
        assert_eq!(g.nearest_gate(RingIndex(0), 3.0).unwrap(), -3.0);
        assert!(matches!(
            g.nearest_gate(RingIndex(4), 0.0),
            Err(Error::NoGate(4))
        ));
    }

    #[test]
    fn plan_examples() {
        let g = MazeGeometry::default();
        assert_eq!(g.plan_gate_sequence(RingIndex(3), 1.0).unwrap().len(), 1);

        let aligned = two_gate(vec![0.0]);
        let plan = aligned.plan_gate_sequence(RingIndex(0), 0.0).unwrap();
        assert_eq!(
            plan,
            vec![
                (RingIndex(0), 0.0),
                (RingIndex(1), 0.0),
                (RingIndex(2), 0.0),
                (RingIndex(3), 0.0)
            ]
        );

        let q = PI / 4.0;
        let chained = MazeGeometry {
            gates: vec![
                vec![q, PI],
                vec![q + 0.1, -2.0],
                vec![q + 0.2, 3.0],
                vec![-q],
            ],
            ..MazeGeometry::default()
        };
        let plan = chained.plan_gate_sequence(RingIndex(0), 0.0).unwrap();
        let angles: Vec<f64> = plan.iter().map(|p| p.1).collect();
        assert_eq!(angles, vec![q, q + 0.1, q + 0.2, -q]);
    }

    #[test]
    fn default_geometry_is_valid() {
        MazeGeometry::default().validate().unwrap();
        let g = MazeGeometry {
            ring_radii: vec![0.08, 0.10, 0.06, 0.04],
            ..Default::default()
        };
        assert!(g.validate().is_err());
        let mut g = MazeGeometry::default();
        g.gates[1] = vec![4.0];
        assert!(g.validate().is_err());
        let g = MazeGeometry {
            channel_half_width: 0.003,
            ..Default::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn geometry_loads_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maze.toml");
        let text = toml::to_string(&MazeGeometry::default()).unwrap();
        std::fs::write(&path, text).unwrap();
        assert_eq!(MazeGeometry::load(&path).unwrap(), MazeGeometry::default());
        assert!(MazeGeometry::load(dir.path().join("missing.toml")).is_err());
    }

    proptest! {
        #[test]
        fn wrap_is_in_range_and_congruent(theta in -1e4f64..1e4) {
            let w = wrap_angle(theta).unwrap();
            prop_assert!(w > -PI && w <= PI);
            let k = ((theta - w) / TAU).round();
            prop_assert!((theta - w - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn nearest_gate_is_a_minimizer(
            gates in prop::collection::vec(-std::f64::consts::PI..std::f64::consts::PI, 1..5),
            theta in -10.0f64..10.0,
        ) {
            let g = two_gate(gates.clone());
            let best = g.nearest_gate(RingIndex(1), theta).unwrap();
            prop_assert!(gates.contains(&best));
            let d_best = wrap(best - theta).abs();
            for gate in gates {
                prop_assert!(d_best <= wrap(gate - theta).abs() + 1e-9);
            }
        }

        #[test]
        fn plan_rings_strictly_increase(start in 0usize..4, theta in -PI..PI) {
            let g = MazeGeometry::default();
            let plan = g.plan_gate_sequence(RingIndex(start), theta).unwrap();
            prop_assert_eq!(plan.len(), 4 - start);
            prop_assert!(plan.windows(2).all(|w| w[1].0 > w[0].0));
        }
    }
}
