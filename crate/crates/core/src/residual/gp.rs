//! Exact GP regression with a bias-augmented linear kernel on standardized
//! features.
//!
//! With `k(x, x') = σ_f² φ(x)ᵀφ(x')` the Gram matrix `K = σ_f² Φ Φᵀ` has rank
//! at most `p = 8`, so every quantity of the exact posterior and of the log
//! marginal likelihood is computed from the eigendecomposition of the
//! `p × p` matrix `ΦᵀΦ` instead of an `n × n` Cholesky factor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw GP input `(β, γ, θ, θ̇, ux, uy)`.
pub type GpInput = [f64; 6];

/// Number of features before the bias is prepended.
pub const NUM_FEATURES: usize = 7;
/// Length of a bias-augmented feature vector.
pub const DESIGN_DIM: usize = NUM_FEATURES + 1;

/// `(β, γ, cos θ, sin θ, θ̇, ux, uy)`
pub fn features(x: &GpInput) -> [f64; NUM_FEATURES] {
    [x[0], x[1], x[2].cos(), x[2].sin(), x[3], x[4], x[5]]
}

/// `σ_f² · aᵀb` on bias-augmented, standardized feature vectors.
pub fn linear_kernel(a: &[f64], b: &[f64], sigma_f: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "kernel inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(sigma_f * sigma_f * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub sigma_f: f64,
    pub sigma_n: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            sigma_f: 1.0,
            sigma_n: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpFitConfig {
    pub restarts: usize,
    pub iterations: usize,
    /// Lower bound on the noise scale, in standardized target units.
    pub sigma_n_min: f64,
    /// Extra starting point tried before the built-in ones.
    pub init: Option<GpHyper>,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            restarts: 5,
            iterations: 200,
            sigma_n_min: 1e-6,
            init: None,
        }
    }
}

const LOG_SIGMA_F_RANGE: (f64, f64) = (-15.0, 15.0);
const LOG_SIGMA_N_MAX: f64 = 15.0;

/// Sufficient statistics of a standardized training set.
#[derive(Clone, Debug)]
struct Stats {
    n: usize,
    eigvals: Vec<f64>,
    eigvecs: DMatrix<f64>,
    /// `Vᵀ Φᵀ y`
    z: Vec<f64>,
    /// `z_i² / λ_i` on the numerically nonzero spectrum, 0 elsewhere.
    c: Vec<f64>,
    /// Squared norm of `y` outside the column space of `Φ`.
    rss: f64,
}

impl Stats {
    fn new(design: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let gram = design.transpose() * design;
        let eig = SymmetricEigen::new(gram);
        let lmax = eig.eigenvalues.max().max(0.0);
        let tol = 1e-12 * lmax.max(1.0);
        let eigvals: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
        let z_vec = eig.eigenvectors.transpose() * (design.transpose() * y);
        let z: Vec<f64> = z_vec.iter().copied().collect();
        let c: Vec<f64> = z
            .iter()
            .zip(&eigvals)
            .map(|(zi, l)| if *l > tol { zi * zi / l } else { 0.0 })
            .collect();
        // least-squares residual, computed directly for accuracy at small noise
        let coef: Vec<f64> = z
            .iter()
            .zip(&eigvals)
            .map(|(zi, l)| if *l > tol { zi / l } else { 0.0 })
            .collect();
        let beta = &eig.eigenvectors * DVector::from_vec(coef);
        let rss = (y - design * beta).norm_squared();
        Stats {
            n: design.nrows(),
            eigvals,
            eigvecs: eig.eigenvectors,
            z,
            c,
            rss,
        }
    }

    /// Log marginal likelihood and its gradient in `(log σ_f, log σ_n)`.
    fn lml(&self, log_sf: f64, log_sn: f64) -> (f64, [f64; 2]) {
        let a = (2.0 * log_sf).exp();
        let b = (2.0 * log_sn).exp();
        let n = self.n as f64;
        let p = self.eigvals.len() as f64;
        let (mut quad, mut logdet) = (self.rss / b, (n - p) * b.ln());
        let (mut ds, mut dt) = (0.0, self.rss / b - (n - p));
        for (l, c) in self.eigvals.iter().zip(&self.c) {
            let d = a * l + b;
            quad += c / d;
            logdet += d.ln();
            ds += a * l * c / (d * d) - a * l / d;
            dt += b * c / (d * d) - b / d;
        }
        (
            -0.5 * quad - 0.5 * logdet - 0.5 * n * (2.0 * PI).ln(),
            [ds, dt],
        )
    }
}

/// A fitted GP. Everything needed for prediction is stored so a serialized
/// model reloads bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub feature_mean: [f64; NUM_FEATURES],
    pub feature_std: [f64; NUM_FEATURES],
    pub target_mean: f64,
    pub target_std: f64,
    pub inputs: Vec<GpInput>,
    pub targets: Vec<f64>,
    /// `(K + σ_n² I)⁻¹ y` in standardized target units.
    pub alpha: Vec<f64>,
    /// Posterior mean of the feature weights, `σ_f² Φᵀ α`.
    pub weight_mean: [f64; DESIGN_DIM],
    /// Posterior covariance of the feature weights, row major.
    pub weight_cov: Vec<f64>,
    pub log_marginal_likelihood: f64,
}

impl GpModel {
    /// The empty-data convention: zero mean and prior variance.
    pub fn prior(hyper: GpHyper) -> Self {
        let s2 = hyper.sigma_f * hyper.sigma_f;
        let mut cov = vec![0.0; DESIGN_DIM * DESIGN_DIM];
        for i in 0..DESIGN_DIM {
            cov[i * DESIGN_DIM + i] = s2;
        }
        GpModel {
            hyper,
            feature_mean: [0.0; NUM_FEATURES],
            feature_std: [1.0; NUM_FEATURES],
            target_mean: 0.0,
            target_std: 1.0,
            inputs: Vec::new(),
            targets: Vec::new(),
            alpha: Vec::new(),
            weight_mean: [0.0; DESIGN_DIM],
            weight_cov: cov,
            log_marginal_likelihood: 0.0,
        }
    }

    /// Standardized, bias-augmented feature vector of `x`.
    pub fn design_row(&self, x: &GpInput) -> [f64; DESIGN_DIM] {
        let f = features(x);
        let mut out = [1.0; DESIGN_DIM];
        for i in 0..NUM_FEATURES {
            out[i + 1] = (f[i] - self.feature_mean[i]) / self.feature_std[i];
        }
        out
    }

    pub fn kernel(&self, a: &GpInput, b: &GpInput) -> f64 {
        let (ra, rb) = (self.design_row(a), self.design_row(b));
        self.hyper.sigma_f
            * self.hyper.sigma_f
            * ra.iter().zip(&rb).map(|(x, y)| x * y).sum::<f64>()
    }

    /// Training targets in standardized units.
    pub fn standardized_targets(&self) -> Vec<f64> {
        self.targets
            .iter()
            .map(|y| (y - self.target_mean) / self.target_std)
            .collect()
    }

    pub fn mean(&self, x: &GpInput) -> f64 {
        let row = self.design_row(x);
        let m: f64 = row.iter().zip(&self.weight_mean).map(|(a, b)| a * b).sum();
        self.target_mean + self.target_std * m
    }

    /// Posterior mean and latent variance, both in target units.
    pub fn predict(&self, x: &GpInput) -> (f64, f64) {
        let row = self.design_row(x);
        let mut var = 0.0;
        for i in 0..DESIGN_DIM {
            let mut acc = 0.0;
            for j in 0..DESIGN_DIM {
                acc += self.weight_cov[i * DESIGN_DIM + j] * row[j];
            }
            var += row[i] * acc;
        }
        (
            self.mean(x),
            (var * self.target_std * self.target_std).max(0.0),
        )
    }

    /// Log marginal likelihood (standardized units) and its gradient with
    /// respect to `(log σ_f, log σ_n)` on this model's training set.
    pub fn lml_and_gradient(&self, log_sigma_f: f64, log_sigma_n: f64) -> (f64, [f64; 2]) {
        let (design, y) = self.standardized_data();
        Stats::new(&design, &y).lml(log_sigma_f, log_sigma_n)
    }

    fn standardized_data(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.inputs.len();
        let mut design = DMatrix::zeros(n, DESIGN_DIM);
        for (r, x) in self.inputs.iter().enumerate() {
            for (c, v) in self.design_row(x).iter().enumerate() {
                design[(r, c)] = *v;
            }
        }
        (design, DVector::from_vec(self.standardized_targets()))
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // constant columns are left unscaled
    (
        mean,
        if std > 1e-12 * mean.abs().max(1.0) {
            std
        } else {
            1.0
        },
    )
}

/// Fits a GP by maximizing the log marginal likelihood over
/// `(log σ_f, log σ_n)` with multi-start projected gradient ascent.
pub fn gp_fit(inputs: &[GpInput], targets: &[f64], config: &GpFitConfig) -> Result<GpModel> {
    if inputs.len() != targets.len() {
        return Err(Error::Fit(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 samples, got {}",
            inputs.len()
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) || inputs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite training data".into()));
    }
    if !(config.sigma_n_min > 0.0) || config.restarts == 0 {
        return Err(Error::Config(
            "GP fit needs sigma_n_min > 0 and at least one start".into(),
        ));
    }

    let mut model = GpModel::prior(GpHyper::default());
    let feats: Vec<[f64; NUM_FEATURES]> = inputs.iter().map(features).collect();
    for i in 0..NUM_FEATURES {
        let (m, s) = mean_std(feats.iter().map(|f| f[i]));
        model.feature_mean[i] = m;
        model.feature_std[i] = s;
    }
    let (tm, ts) = mean_std(targets.iter().copied());
    model.target_mean = tm;
    model.target_std = ts;
    model.inputs = inputs.to_vec();
    model.targets = targets.to_vec();

    let (design, y) = model.standardized_data();
    let stats = Stats::new(&design, &y);
    let lo_n = config.sigma_n_min.ln();
    let project = |v: [f64; 2]| {
        [
            v[0].clamp(LOG_SIGMA_F_RANGE.0, LOG_SIGMA_F_RANGE.1),
            v[1].clamp(lo_n, LOG_SIGMA_N_MAX),
        ]
    };

    let mut starts: Vec<[f64; 2]> = Vec::new();
    if let Some(h) = config.init {
        starts.push([h.sigma_f.ln(), h.sigma_n.ln()]);
    }
    let builtin = [
        [0.0, -2.3],
        [0.0, -6.9],
        [0.7, -1.2],
        [-1.0, -4.6],
        [0.5, -11.5],
    ];
    starts.extend(builtin.iter().cycle().take(config.restarts));

    let mut best: Option<([f64; 2], f64)> = None;
    for s0 in starts {
        let mut v = project(s0);
        let (mut f, mut g) = stats.lml(v[0], v[1]);
        let mut step = 1.0;
        for _ in 0..config.iterations {
            let mut accepted = false;
            for _ in 0..40 {
                let cand = project([v[0] + step * g[0], v[1] + step * g[1]]);
                let (fc, gc) = stats.lml(cand[0], cand[1]);
                if fc.is_finite() && fc > f {
                    let moved = (cand[0] - v[0]).abs() + (cand[1] - v[1]).abs();
                    v = cand;
                    f = fc;
                    g = gc;
                    accepted = moved > 1e-12;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if best.is_none_or(|(_, bf)| f > bf) {
            best = Some((v, f));
        }
    }
    let (v, lml) = best.expect("at least one start");
    if !lml.is_finite() {
        return Err(Error::Fit("log marginal likelihood is not finite".into()));
    }

    let a = (2.0 * v[0]).exp();
    let b = (2.0 * v[1]).exp();
    let p = DESIGN_DIM;
    let lmax = stats.eigvals.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-12 * lmax.max(1.0);
    let mut mean_coef = DVector::zeros(p);
    let mut cov_diag = DVector::zeros(p);
    for i in 0..p {
        let l = stats.eigvals[i];
        if l > tol {
            mean_coef[i] = stats.z[i] / (l + b / a);
        }
        cov_diag[i] = 1.0 / (l / b + 1.0 / a);
    }
    let vmat = &stats.eigvecs;
    let w = vmat * mean_coef;
    let cov = vmat * DMatrix::from_diagonal(&cov_diag) * vmat.transpose();
    let alpha = (&y - &design * &w) / b;

    model.hyper = GpHyper {
        sigma_f: v[0].exp(),
        sigma_n: v[1].exp(),
    };
    for i in 0..p {
        model.weight_mean[i] = w[i];
    }
    model.weight_cov = (0..p * p).map(|k| cov[(k / p, k % p)]).collect();
    model.alpha = alpha.iter().copied().collect();
    model.log_marginal_likelihood = lml;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_inputs(n: usize, seed: u64) -> Vec<GpInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.15..0.15),
                    rng.gen_range(-0.15..0.15),
                    rng.gen_range(-3.1..3.1),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn kernel_basics() {
        let zero = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(linear_kernel(&zero, &zero, 1.5).unwrap(), 2.25);
        assert!(linear_kernel(&zero, &zero[..3], 1.0).is_err());
        let m = GpModel::prior(GpHyper {
            sigma_f: 0.7,
            sigma_n: 0.1,
        });
        let xs = random_inputs(20, 1);
        for a in &xs {
            assert!(m.kernel(a, a) >= 0.49);
            for b in &xs {
                assert_eq!(m.kernel(a, b), m.kernel(b, a));
            }
        }
    }

    #[test]
    fn prior_model_predicts_prior() {
        let h = GpHyper {
            sigma_f: 2.0,
            sigma_n: 0.1,
        };
        let m = GpModel::prior(h);
        let x = [0.1, -0.05, 0.3, 1.0, 0.2, -0.4];
        let (mean, var) = m.predict(&x);
        assert_eq!(mean, 0.0);
        assert!((var - m.kernel(&x, &x)).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_is_a_fit_error() {
        let xs = random_inputs(1, 2);
        assert!(matches!(
            gp_fit(&xs, &[1.0], &GpFitConfig::default()),
            Err(Error::Fit(_))
        ));
        assert!(gp_fit(&xs, &[1.0, 2.0], &GpFitConfig::default()).is_err());
    }

    #[test]
    fn identical_inputs_absorb_contradiction_as_noise() {
        let x = [0.01, 0.02, 0.5, 0.1, 0.3, -0.2];
        let m = gp_fit(&[x, x], &[1.0, 3.0], &GpFitConfig::default()).unwrap();
        assert!(m.hyper.sigma_n > 0.1, "sigma_n = {}", m.hyper.sigma_n);
        assert!((m.mean(&x) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_targets_give_zero_corrections() {
        let xs = random_inputs(30, 3);
        let m = gp_fit(&xs, &[0.0; 30], &GpFitConfig::default()).unwrap();
        for x in &xs {
            assert!(m.mean(x).abs() < 1e-12);
        }
    }

    #[test]
    fn lml_beats_every_start() {
        let xs = random_inputs(60, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| x[0] * 3.0 - x[3] + 0.1 * rng.gen::<f64>())
            .collect();
        let cfg = GpFitConfig::default();
        let m = gp_fit(&xs, &ys, &cfg).unwrap();
        for s in [
            [0.0, -2.3],
            [0.0, -6.9],
            [0.7, -1.2],
            [-1.0, -4.6],
            [0.5, -11.5],
        ] {
            let (f, _) = m.lml_and_gradient(s[0], s[1].max(cfg.sigma_n_min.ln()));
            assert!(m.log_marginal_likelihood >= f);
        }
    }

    #[test]
    fn round_trip_through_json_is_exact() {
        let xs = random_inputs(25, 5);
        let ys: Vec<f64> = xs.iter().map(|x| x[2].sin() + 0.3 * x[4]).collect();
        let m = gp_fit(&xs, &ys, &GpFitConfig::default()).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: GpModel = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
        let probe = [0.05, 0.01, -1.0, 0.4, 0.1, 0.9];
        assert_eq!(m.predict(&probe), back.predict(&probe));
    }
}
