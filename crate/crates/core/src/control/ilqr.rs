//! Iterative LQR over a generic discrete-time model.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::wrap;

/// A discrete-time model `x_{k+1} = f(x_k, u_k)`.
pub trait Dynamics<const N: usize, const M: usize> {
    fn step(&self, x: &SVector<f64, N>, u: &SVector<f64, M>) -> Result<SVector<f64, N>>;

    /// Index of a state coordinate that is an angle, if any. Differences in
    /// that coordinate are wrapped to `(−π, π]`.
    fn angle_index(&self) -> Option<usize> {
        None
    }
}

/// `a ⊖ b` with the angle coordinate wrapped.
pub fn state_diff<const N: usize>(
    a: &SVector<f64, N>,
    b: &SVector<f64, N>,
    angle: Option<usize>,
) -> SVector<f64, N> {
    let mut d = a - b;
    if let Some(i) = angle {
        d[i] = wrap(d[i]);
    }
    d
}

/// Central finite-difference Jacobians `(A, B)` of `f` at `(x, u)` with
/// per-coordinate steps `h_i = rel_step · max(1, |z_i|)`.
pub fn linearize<const N: usize, const M: usize, F: Dynamics<N, M> + ?Sized>(
    f: &F,
    x: &SVector<f64, N>,
    u: &SVector<f64, M>,
    rel_step: f64,
) -> Result<(SMatrix<f64, N, N>, SMatrix<f64, N, M>)> {
    let angle = f.angle_index();
    let mut a = SMatrix::<f64, N, N>::zeros();
    let mut b = SMatrix::<f64, N, M>::zeros();
    for i in 0..N {
        let h = rel_step * x[i].abs().max(1.0);
        let (mut xp, mut xm) = (*x, *x);
        xp[i] += h;
        xm[i] -= h;
        let col = state_diff(&f.step(&xp, u)?, &f.step(&xm, u)?, angle) / (2.0 * h);
        a.set_column(i, &col);
    }
    for j in 0..M {
        let h = rel_step * u[j].abs().max(1.0);
        let (mut up, mut um) = (*u, *u);
        up[j] += h;
        um[j] -= h;
        let col = state_diff(&f.step(x, &up)?, &f.step(x, &um)?, angle) / (2.0 * h);
        b.set_column(j, &col);
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite linearization".into()));
    }
    Ok((a, b))
}

/// Quadratic tracking cost
/// `Σ_{k<T} ‖x_k ⊖ x̂_k‖²_W + λ_u ‖u_k − û_k‖² + ‖x_T ⊖ x̂_T‖²_{W_T}`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost<const N: usize, const M: usize> {
    pub state_weight: SVector<f64, N>,
    pub terminal_weight: SVector<f64, N>,
    pub control_weight: f64,
    /// `T + 1` state targets.
    pub state_targets: Vec<SVector<f64, N>>,
    /// `T` control targets.
    pub control_targets: Vec<SVector<f64, M>>,
}

impl<const N: usize, const M: usize> QuadraticCost<N, M> {
    /// A fixed target state with zero control targets.
    pub fn regulate(
        weight: SVector<f64, N>,
        control_weight: f64,
        target: SVector<f64, N>,
        horizon: usize,
    ) -> Self {
        QuadraticCost {
            state_weight: weight,
            terminal_weight: weight,
            control_weight,
            state_targets: vec![target; horizon + 1],
            control_targets: vec![SVector::zeros(); horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.control_targets.len()
    }

    fn stage(
        &self,
        k: usize,
        x: &SVector<f64, N>,
        u: &SVector<f64, M>,
        angle: Option<usize>,
    ) -> f64 {
        let dx = state_diff(x, &self.state_targets[k], angle);
        let du = u - self.control_targets[k];
        dx.component_mul(&dx).dot(&self.state_weight) + self.control_weight * du.norm_squared()
    }

    fn terminal(&self, x: &SVector<f64, N>, angle: Option<usize>) -> f64 {
        let dx = state_diff(x, &self.state_targets[self.horizon()], angle);
        dx.component_mul(&dx).dot(&self.terminal_weight)
    }

    pub fn total(
        &self,
        xs: &[SVector<f64, N>],
        us: &[SVector<f64, M>],
        angle: Option<usize>,
    ) -> f64 {
        let t = self.horizon();
        (0..t)
            .map(|k| self.stage(k, &xs[k], &us[k], angle))
            .sum::<f64>()
            + self.terminal(&xs[t], angle)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IlqrConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub fd_step: f64,
    /// Symmetric action bound; `None` leaves actions unconstrained.
    pub action_bound: Option<f64>,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_factor: f64,
    pub line_search_steps: usize,
}

impl Default for IlqrConfig {
    fn default() -> Self {
        IlqrConfig {
            max_iterations: 100,
            rel_tol: 1e-6,
            fd_step: 1e-5,
            action_bound: Some(1.0),
            reg_init: 0.0,
            reg_min: 1e-8,
            reg_max: 1e10,
            reg_factor: 10.0,
            line_search_steps: 10,
        }
    }
}

/// Optimized states `x_0..x_T`, controls `u_0..u_{T−1}` and feedback gains.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<const N: usize, const M: usize> {
    pub states: Vec<SVector<f64, N>>,
    pub controls: Vec<SVector<f64, M>>,
    pub gains: Vec<SMatrix<f64, M, N>>,
}

impl<const N: usize, const M: usize> Trajectory<N, M> {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IlqrSolution<const N: usize, const M: usize> {
    pub trajectory: Trajectory<N, M>,
    pub cost: f64,
    /// Cost of the initial rollout followed by every accepted iterate.
    pub cost_history: Vec<f64>,
    /// Backward passes performed.
    pub iterations: usize,
    pub converged: bool,
}

fn clamp_action<const M: usize>(u: SVector<f64, M>, bound: Option<f64>) -> SVector<f64, M> {
    match bound {
        Some(b) => u.map(|v| v.clamp(-b, b)),
        None => u,
    }
}

fn rollout<const N: usize, const M: usize, F: Dynamics<N, M> + ?Sized>(
    f: &F,
    x0: &SVector<f64, N>,
    us: &[SVector<f64, M>],
) -> Result<Vec<SVector<f64, N>>> {
    let mut xs = Vec::with_capacity(us.len() + 1);
    xs.push(*x0);
    for u in us {
        let next = f.step(xs.last().expect("nonempty"), u)?;
        xs.push(next);
    }
    Ok(xs)
}

struct BackwardPass<const N: usize, const M: usize> {
    feedforward: Vec<SVector<f64, M>>,
    gains: Vec<SMatrix<f64, M, N>>,
    /// Cost decrease the local quadratic model predicts for a full step.
    expected_decrease: f64,
}

fn backward_pass<const N: usize, const M: usize>(
    cost: &QuadraticCost<N, M>,
    xs: &[SVector<f64, N>],
    us: &[SVector<f64, M>],
    jac: &[(SMatrix<f64, N, N>, SMatrix<f64, N, M>)],
    angle: Option<usize>,
    reg: f64,
) -> Option<BackwardPass<N, M>> {
    let t = us.len();
    let wt = SMatrix::<f64, N, N>::from_diagonal(&cost.terminal_weight);
    let w = SMatrix::<f64, N, N>::from_diagonal(&cost.state_weight);
    let r = SMatrix::<f64, M, M>::identity() * cost.control_weight;
    let mut vx = 2.0 * wt * state_diff(&xs[t], &cost.state_targets[t], angle);
    let mut vxx = 2.0 * wt;
    let mut feedforward = vec![SVector::<f64, M>::zeros(); t];
    let mut gains = vec![SMatrix::<f64, M, N>::zeros(); t];
    let mut expected_decrease = 0.0;
    for k in (0..t).rev() {
        let (a, b) = &jac[k];
        let lx = 2.0 * w * state_diff(&xs[k], &cost.state_targets[k], angle);
        let lu = 2.0 * r * (us[k] - cost.control_targets[k]);
        let qx = lx + a.transpose() * vx;
        let qu = lu + b.transpose() * vx;
        let qxx = 2.0 * w + a.transpose() * vxx * a;
        let quu = 2.0 * r + b.transpose() * vxx * b + SMatrix::<f64, M, M>::identity() * reg;
        let qux = b.transpose() * vxx * a;
        let chol = quu.cholesky()?;
        let kff = -chol.solve(&qu);
        let kfb = -chol.solve(&qux);
        expected_decrease -= kff.dot(&qu) + 0.5 * kff.dot(&(quu * kff));
        vx = qx + kfb.transpose() * quu * kff + kfb.transpose() * qu + qux.transpose() * kff;
        vxx = qxx + kfb.transpose() * quu * kfb + kfb.transpose() * qux + qux.transpose() * kfb;
        vxx = 0.5 * (vxx + vxx.transpose());
        feedforward[k] = kff;
        gains[k] = kfb;
    }
    Some(BackwardPass {
        feedforward,
        gains,
        expected_decrease,
    })
}

/// Minimizes `cost` over control sequences from `x0` under `f`, starting
/// from `init_controls` (length = cost horizon).
pub fn ilqr_solve<const N: usize, const M: usize, F: Dynamics<N, M> + ?Sized>(
    f: &F,
    x0: &SVector<f64, N>,
    cost: &QuadraticCost<N, M>,
    init_controls: &[SVector<f64, M>],
    config: &IlqrConfig,
) -> Result<IlqrSolution<N, M>> {
    let t = cost.horizon();
    if t == 0 {
        return Err(Error::Domain("horizon must be at least one step".into()));
    }
    if init_controls.len() != t || cost.state_targets.len() != t + 1 {
        return Err(Error::Domain(format!(
            "horizon mismatch: {} controls, {} state targets for T = {t}",
            init_controls.len(),
            cost.state_targets.len()
        )));
    }
    let angle = f.angle_index();
    let mut x0 = *x0;
    if let Some(i) = angle {
        x0[i] = wrap(x0[i]);
    }
    let mut us: Vec<_> = init_controls
        .iter()
        .map(|u| clamp_action(*u, config.action_bound))
        .collect();
    let mut xs = rollout(f, &x0, &us)?;
    let mut j = cost.total(&xs, &us, angle);
    let mut history = vec![j];
    let mut gains = vec![SMatrix::<f64, M, N>::zeros(); t];
    let mut reg = config.reg_init;
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < config.max_iterations {
        let jac: Vec<_> = xs[..t]
            .iter()
            .zip(&us)
            .map(|(x, u)| linearize(f, x, u, config.fd_step))
            .collect::<Result<_>>()?;
        iterations += 1;

        let pass = loop {
            match backward_pass(cost, &xs, &us, &jac, angle, reg) {
                Some(p) => break p,
                None => {
                    reg = (reg * config.reg_factor).max(config.reg_min);
                    if reg > config.reg_max {
                        return Err(Error::Solver(
                            "backward pass not positive definite at maximum regularization".into(),
                        ));
                    }
                }
            }
        };
        gains.clone_from(&pass.gains);

        let step_norm = pass
            .feedforward
            .iter()
            .zip(&us)
            .map(|(k, u)| k.amax() / (1.0 + u.amax()))
            .fold(0.0, f64::max);
        if step_norm < 1e-10 || pass.expected_decrease < config.rel_tol * j.abs() {
            converged = true;
            break;
        }

        let mut alpha = 1.0;
        for _ in 0..config.line_search_steps {
            let mut nxs = Vec::with_capacity(t + 1);
            let mut nus = Vec::with_capacity(t);
            nxs.push(x0);
            for k in 0..t {
                let dx = state_diff(&nxs[k], &xs[k], angle);
                let u = clamp_action(
                    us[k] + alpha * pass.feedforward[k] + pass.gains[k] * dx,
                    config.action_bound,
                );
                let next = f.step(&nxs[k], &u)?;
                nus.push(u);
                nxs.push(next);
            }
            let nj = cost.total(&nxs, &nus, angle);
            if nj.is_finite() && nj < j {
                let rel = (j - nj) / j.abs().max(f64::MIN_POSITIVE);
                xs = nxs;
                us = nus;
                j = nj;
                history.push(j);
                reg = if reg / config.reg_factor < config.reg_min {
                    0.0
                } else {
                    reg / config.reg_factor
                };
                if rel < config.rel_tol {
                    converged = true;
                    break 'outer;
                }
                continue 'outer;
            }
            alpha *= 0.5;
        }
        // no improving step: raise the regularization or stop
        reg = (reg * config.reg_factor).max(config.reg_min);
        if reg > config.reg_max {
            converged = true;
            break;
        }
    }

    Ok(IlqrSolution {
        trajectory: Trajectory {
            states: xs,
            controls: us,
            gains,
        },
        cost: j,
        cost_history: history,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::{Matrix1, Matrix2, Vector1, Vector2};

    use super::*;

    struct Linear {
        a: Matrix2<f64>,
        b: SMatrix<f64, 2, 1>,
    }

    impl Dynamics<2, 1> for Linear {
        fn step(&self, x: &Vector2<f64>, u: &Vector1<f64>) -> Result<Vector2<f64>> {
            Ok(self.a * x + self.b * u)
        }
    }

    fn double_integrator() -> Linear {
        let dt = 0.1;
        Linear {
            a: Matrix2::new(1.0, dt, 0.0, 1.0),
            b: SMatrix::<f64, 2, 1>::new(0.5 * dt * dt, dt),
        }
    }

    #[test]
    fn linearize_is_exact_for_linear_maps() {
        let f = double_integrator();
        let (a, b) = linearize(&f, &Vector2::new(0.3, -2.0), &Vector1::new(0.5), 1e-5).unwrap();
        assert!((a - f.a).amax() < 1e-8);
        assert!((b - f.b).amax() < 1e-8);
    }

    #[test]
    fn riccati_equivalence() {
        let f = double_integrator();
        let (q, rho, horizon) = (Vector2::new(1.0, 0.5), 0.3, 20);
        let cost = QuadraticCost::regulate(q, rho, Vector2::zeros(), horizon);
        let x0 = Vector2::new(1.0, 0.0);
        let cfg = IlqrConfig {
            action_bound: None,
            ..IlqrConfig::default()
        };
        let sol = ilqr_solve(&f, &x0, &cost, &vec![Vector1::zeros(); horizon], &cfg).unwrap();
        assert!(sol.iterations <= 2);

        // discrete Riccati recursion for Σ xᵀQx + ρu² + x_TᵀQx_T
        let qm = Matrix2::from_diagonal(&q);
        let r = Matrix1::new(rho);
        let mut p = qm;
        let mut ks = vec![SMatrix::<f64, 1, 2>::zeros(); horizon];
        for k in (0..horizon).rev() {
            let s = r + f.b.transpose() * p * f.b;
            let kk = -s.try_inverse().unwrap() * f.b.transpose() * p * f.a;
            p = qm + f.a.transpose() * p * f.a + f.a.transpose() * p * f.b * kk;
            ks[k] = kk;
        }
        let mut x = x0;
        for k in 0..horizon {
            let u = ks[k] * x;
            assert!((sol.trajectory.controls[k] - u).amax() < 1e-6);
            assert!((sol.trajectory.states[k] - x).amax() < 1e-6);
            assert!((sol.trajectory.gains[k] - ks[k]).amax() < 1e-8);
            x = f.a * x + f.b * u;
        }
    }

    #[test]
    fn cost_history_is_non_increasing() {
        struct Pendulum;
        impl Dynamics<2, 1> for Pendulum {
            fn step(&self, x: &Vector2<f64>, u: &Vector1<f64>) -> Result<Vector2<f64>> {
                let dt = 0.05;
                let w = x[1] + dt * (-9.81 * x[0].sin() + 3.0 * u[0]);
                Ok(Vector2::new(x[0] + dt * w, w))
            }
            fn angle_index(&self) -> Option<usize> {
                Some(0)
            }
        }
        let cost = QuadraticCost::regulate(
            Vector2::new(1.0, 0.1),
            0.01,
            Vector2::new(std::f64::consts::PI, 0.0),
            60,
        );
        let sol = ilqr_solve(
            &Pendulum,
            &Vector2::zeros(),
            &cost,
            &vec![Vector1::new(0.1); 60],
            &IlqrConfig::default(),
        )
        .unwrap();
        assert!(sol.cost_history.windows(2).all(|w| w[1] < w[0]));
        assert!(sol.trajectory.controls.iter().all(|u| u[0].abs() <= 1.0));
        let zero = cost.total(
            &rollout(&Pendulum, &Vector2::zeros(), &vec![Vector1::zeros(); 60]).unwrap(),
            &vec![Vector1::zeros(); 60],
            Some(0),
        );
        assert!(sol.cost <= zero);
    }

    #[test]
    fn at_target_stays_put() {
        let f = double_integrator();
        let cost = QuadraticCost::regulate(Vector2::new(1.0, 1.0), 1.0, Vector2::zeros(), 10);
        let sol = ilqr_solve(
            &f,
            &Vector2::zeros(),
            &cost,
            &[Vector1::zeros(); 10],
            &IlqrConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.cost, 0.0);
        assert!(sol.trajectory.controls.iter().all(|u| u[0] == 0.0));
        assert!(sol.converged);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let f = double_integrator();
        let cost = QuadraticCost::regulate(Vector2::new(1.0, 1.0), 1.0, Vector2::zeros(), 5);
        assert!(ilqr_solve(
            &f,
            &Vector2::zeros(),
            &cost,
            &[Vector1::zeros(); 4],
            &IlqrConfig::default()
        )
        .is_err());
        let empty = QuadraticCost::regulate(Vector2::new(1.0, 1.0), 1.0, Vector2::zeros(), 0);
        assert!(ilqr_solve(&f, &Vector2::zeros(), &empty, &[], &IlqrConfig::default()).is_err());
    }
}
