//! (μ/μ_w, λ)-CMA-ES with cumulative step-size adaptation and combined
//! rank-one / rank-μ covariance updates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmaEsConfig {
    /// Offspring per generation; `None` uses `4 + floor(3 ln n)`.
    pub population: Option<usize>,
    /// Initial standard deviation per coordinate.
    pub sigma0: Vec<f64>,
    pub max_evals: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub seed: u64,
}

impl CmaEsConfig {
    pub fn new(sigma0: Vec<f64>) -> Self {
        CmaEsConfig {
            population: None,
            sigma0,
            max_evals: 10_000,
            f_tol: 1e-12,
            x_tol: 1e-12,
            seed: 0,
        }
    }

    fn lambda(&self, n: usize) -> usize {
        self.population
            .unwrap_or_else(|| 4 + (3.0 * (n as f64).ln()).floor() as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FTol,
    XTol,
    MaxEvals,
    Degenerate,
}

/// Per-generation optimizer record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub generation: usize,
    pub evals: usize,
    /// Best value seen so far.
    pub f_best: f64,
    /// Best value among this generation's offspring.
    pub f_gen: f64,
    pub sigma: f64,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaEsResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub evals: usize,
    pub termination: Termination,
    pub history: Vec<Generation>,
}

/// Minimizes `objective` from `x0`.
///
/// Non-finite samples are ranked as the worst finite value of their
/// generation plus a unit penalty, so they never win selection.
pub fn cma_es_minimize<F>(mut objective: F, x0: &[f64], config: &CmaEsConfig) -> Result<CmaEsResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(Error::Setup("empty search space".into()));
    }
    if config.sigma0.len() != n || config.sigma0.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Setup(format!(
            "sigma0 must hold {n} positive entries"
        )));
    }
    let lambda = config.lambda(n);
    if lambda < 4 {
        return Err(Error::Setup(format!("population {lambda} is below 4")));
    }
    if config.max_evals <= lambda {
        return Err(Error::Setup(format!(
            "max_evals {} must exceed the population {lambda}",
            config.max_evals
        )));
    }
    let f0 = objective(x0);
    if !f0.is_finite() {
        return Err(Error::Setup(format!(
            "objective is not finite at x0 ({f0})"
        )));
    }

    // strategy constants
    let nf = n as f64;
    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu)
        .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
        .collect();
    let wsum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
    let tol_window = 10 + (30.0 * nf / lambda as f64).ceil() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mean = DVector::from_column_slice(x0);
    let mut sigma = 1.0;
    let mut cov = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        config.sigma0.iter().map(|s| s * s),
    ));
    let mut p_sigma = DVector::zeros(n);
    let mut p_c = DVector::zeros(n);

    let mut x_best = x0.to_vec();
    let mut f_best = f0;
    let mut evals = 1;
    let mut history = Vec::new();
    let mut recent_best: Vec<f64> = Vec::new();

    let termination = loop {
        if evals + lambda > config.max_evals {
            break Termination::MaxEvals;
        }
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            break Termination::Degenerate;
        }
        let d = eig.eigenvalues.map(f64::sqrt);
        let b = eig.eigenvectors;

        let mut offspring: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &b * z.component_mul(&d);
            let x = &mean + sigma * &y;
            let f = objective(x.as_slice());
            offspring.push((f, x, y));
        }
        evals += lambda;

        let worst_finite = offspring
            .iter()
            .map(|o| o.0)
            .filter(|f| f.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        let penalty_base = if worst_finite.is_finite() {
            worst_finite
        } else {
            f_best
        };
        for o in &mut offspring {
            if !o.0.is_finite() {
                o.0 = penalty_base + 1.0 + penalty_base.abs();
            }
        }
        offspring.sort_by(|a, b| a.0.total_cmp(&b.0));
        let f_gen = offspring[0].0;
        if f_gen < f_best {
            f_best = f_gen;
            x_best = offspring[0].1.as_slice().to_vec();
        }

        // recombination
        let mut y_w = DVector::zeros(n);
        for (w, o) in weights.iter().zip(&offspring) {
            y_w += *w * &o.2;
        }
        mean += sigma * &y_w;

        // step-size path uses C^{-1/2} y_w = B D^{-1} B^T y_w
        let inv_sqrt_y = &b * (b.transpose() * &y_w).component_div(&d);
        p_sigma =
            (1.0 - c_sigma) * &p_sigma + (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt() * inv_sqrt_y;
        let gen = history.len() + 1;
        let ps_norm = p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - c_sigma).powi(2 * gen as i32)).sqrt()
            < (1.4 + 2.0 / (nf + 1.0)) * chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };
        p_c = (1.0 - c_c) * &p_c + h * (c_c * (2.0 - c_c) * mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, o) in weights.iter().zip(&offspring) {
            rank_mu += *w * &o.2 * o.2.transpose();
        }
        let decay = 1.0 - c_1 - c_mu + (1.0 - h) * c_1 * c_c * (2.0 - c_c);
        cov = decay * &cov + c_1 * &p_c * p_c.transpose() + c_mu * rank_mu;
        cov = 0.5 * (&cov + cov.transpose());
        sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();

        history.push(Generation {
            generation: gen,
            evals,
            f_best,
            f_gen,
            sigma,
            mean: mean.as_slice().to_vec(),
        });

        recent_best.push(f_gen);
        if recent_best.len() > tol_window {
            recent_best.remove(0);
        }
        if recent_best.len() == tol_window {
            let (lo, hi) = recent_best
                .iter()
                .chain(offspring.iter().map(|o| &o.0))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| {
                    (lo.min(*f), hi.max(*f))
                });
            if hi - lo < config.f_tol {
                break Termination::FTol;
            }
        }
        let max_sd = sigma * cov.diagonal().max().sqrt();
        if max_sd < config.x_tol {
            break Termination::XTol;
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            break Termination::Degenerate;
        }
    };

    Ok(CmaEsResult {
        x_best,
        f_best,
        evals,
        termination,
        history,
    })
}
