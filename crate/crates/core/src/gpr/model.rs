use log::debug;
use nalgebra::{linalg::Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::{factorize, lml_and_gradient, signal_covariance};
use super::optimize::{minimize, LbfgsSettings, Minimum};
use super::{GprError, Hyperparameters, Result, Standardizer, TrainingSet, Z_95};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Multi-start marginal-likelihood maximization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of random starting points.
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Convergence on the change in log marginal likelihood.
    pub lml_tol: f64,
    /// Convergence on the gradient ∞-norm.
    pub grad_tol: f64,
    /// Extra starting points tried before the random ones, in the model's
    /// standardized-input / centered-target space.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub initial_points: Vec<Hyperparameters>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            seed: 42,
            max_iter: 200,
            lml_tol: 1e-7,
            grad_tol: 1e-6,
            initial_points: Vec::new(),
        }
    }
}

// Search box in log space. Amplitude and noise bounds are relative to the
// target standard deviation so the fit is equivariant under target scaling.
const LOG_LENGTHSCALE_BOUNDS: (f64, f64) = (-6.907_755_278_982_137, 9.210_340_371_976_184); // 1e-3 .. 1e4
const LOG_REL_SIGMA_F_BOUNDS: (f64, f64) = (-6.907_755_278_982_137, 6.907_755_278_982_137); // 1e-3 .. 1e3
const LOG_REL_SIGMA_N_BOUNDS: (f64, f64) = (-13.815_510_557_964_274, std::f64::consts::LN_10); // 1e-6 .. 10

// Random start distribution (log-uniform).
const START_LENGTHSCALE: (f64, f64) = (0.1, 10.0);
const START_REL_SIGMA_F: (f64, f64) = (0.1, 10.0);
const START_REL_SIGMA_N: (f64, f64) = (1e-3, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// A conditioned GP, immutable after construction.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub hyper: Hyperparameters,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    pub standardizer: Standardizer,
    pub lml: f64,
    pub jitter: f64,
}

impl TrainedModel {
    /// Conditions on `ts` with fixed hyperparameters.
    pub fn condition(ts: TrainingSet, hyper: Hyperparameters) -> Result<Self> {
        hyper.check()?;
        let k_f = signal_covariance(&ts.x, &hyper)?;
        let fac = factorize(&k_f, hyper.sigma_n().powi(2))?;
        let alpha = fac.chol.solve(&ts.y);
        let n = ts.len() as f64;
        let lml = -0.5 * ts.y.dot(&alpha)
            - 0.5 * fac.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            hyper,
            x_train: ts.x,
            y_train: ts.y,
            chol: fac.chol,
            alpha,
            standardizer: ts.standardizer,
            lml,
            jitter: fac.jitter,
        })
    }

    /// Lower-triangular factor of `K_f + (σ_n² + jitter) I`.
    pub fn chol_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn dim(&self) -> usize {
        self.x_train.ncols()
    }

    pub fn predict(&self, x_raw: &[f64]) -> Result<PosteriorPrediction> {
        let z = self.standardizer.transform(x_raw)?;
        let n = self.x_train.nrows();
        let sf2 = self.hyper.sigma_f().powi(2);
        let inv_l: Vec<f64> = self.hyper.log_lengthscale.iter().map(|l| (-l).exp()).collect();
        let k_star = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let r2: f64 = z
                    .iter()
                    .zip(self.x_train.row(i).iter())
                    .zip(&inv_l)
                    .map(|((a, b), il)| ((a - b) * il).powi(2))
                    .sum();
                sf2 * (-0.5 * r2).exp()
            }),
        );
        let mean = k_star.dot(&self.alpha) + self.standardizer.target_mean;
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k_star)
            .ok_or(GprError::FactorizationFailure)?;
        let raw_var = self.hyper.sigma_n().powi(2) + sf2 - v.dot(&v);
        let variance = raw_var.max(0.0);
        let half = Z_95 * variance.sqrt();
        Ok(PosteriorPrediction {
            mean,
            variance,
            ci_low: mean - half,
            ci_high: mean + half,
        })
    }

    pub fn to_document(&self) -> ModelDocument {
        let l = self.chol.l_dirty();
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            hyperparameters: self.hyper.clone(),
            standardizer: self.standardizer.clone(),
            x_train: self
                .x_train
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            y_train: self.y_train.iter().copied().collect(),
            alpha: self.alpha.iter().copied().collect(),
            chol_lower: (0..l.nrows())
                .map(|i| (0..=i).map(|j| l[(i, j)]).collect())
                .collect(),
            jitter: self.jitter,
            lml: self.lml,
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        let bad = |m: &str| GprError::Document(m.to_owned());
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", doc.format_version)));
        }
        let n = doc.x_train.len();
        let d = doc.hyperparameters.dim();
        if doc.y_train.len() != n || doc.alpha.len() != n || doc.chol_lower.len() != n {
            return Err(bad("inconsistent training-set sizes"));
        }
        if doc.standardizer.dim() != d || doc.x_train.iter().any(|r| r.len() != d) {
            return Err(bad("inconsistent input dimension"));
        }
        let mut l = DMatrix::zeros(n, n);
        for (i, row) in doc.chol_lower.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(bad("malformed Cholesky factor"));
            }
            for (j, v) in row.iter().enumerate() {
                l[(i, j)] = *v;
            }
        }
        Ok(Self {
            hyper: doc.hyperparameters,
            x_train: DMatrix::from_fn(n, d, |i, j| doc.x_train[i][j]),
            y_train: DVector::from_vec(doc.y_train),
            chol: Cholesky::pack_dirty(l),
            alpha: DVector::from_vec(doc.alpha),
            standardizer: doc.standardizer,
            lml: doc.lml,
            jitter: doc.jitter,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("model document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| GprError::Document(e.to_string()))?;
        Self::from_document(doc)
    }
}

/// Serialized form of a [`TrainedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub hyperparameters: Hyperparameters,
    pub standardizer: Standardizer,
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Row `i` holds `L[i][0..=i]`.
    pub chol_lower: Vec<Vec<f64>>,
    pub jitter: f64,
    pub lml: f64,
}

/// Standardizes the data, then fits by multi-start maximization of the log
/// marginal likelihood.
pub fn fit(raw_x: &[Vec<f64>], raw_y: &[f64], config: &FitConfig) -> Result<TrainedModel> {
    fit_training_set(TrainingSet::new(raw_x, raw_y)?, config)
}

pub fn fit_training_set(ts: TrainingSet, config: &FitConfig) -> Result<TrainedModel> {
    let d = ts.dim();
    let y_scale = {
        let n = ts.len() as f64;
        let s = (ts.y.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    };
    let ln_scale = y_scale.ln();

    let mut lower = vec![LOG_REL_SIGMA_F_BOUNDS.0 + ln_scale];
    let mut upper = vec![LOG_REL_SIGMA_F_BOUNDS.1 + ln_scale];
    lower.extend(std::iter::repeat_n(LOG_LENGTHSCALE_BOUNDS.0, d));
    upper.extend(std::iter::repeat_n(LOG_LENGTHSCALE_BOUNDS.1, d));
    lower.push(LOG_REL_SIGMA_N_BOUNDS.0 + ln_scale);
    upper.push(LOG_REL_SIGMA_N_BOUNDS.1 + ln_scale);
    let settings = LbfgsSettings {
        max_iter: config.max_iter,
        f_tol: config.lml_tol,
        g_tol: config.grad_tol,
        memory: 10,
        lower,
        upper,
    };

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(config.initial_points.len() + config.restarts);
    for h in &config.initial_points {
        if h.dim() != d {
            return Err(GprError::DimensionMismatch {
                expected: d,
                got: h.dim(),
            });
        }
        starts.push(h.to_vec());
    }
    for r in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r as u64);
        starts.push(random_start(&mut rng, d, ln_scale));
    }

    let objective = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let h = Hyperparameters::from_slice(theta);
        let (lml, grad) = lml_and_gradient(&ts.x, &ts.y, &h).ok()?;
        Some((-lml, grad.into_iter().map(|g| -g).collect()))
    };

    let results: Vec<Option<Minimum>> = starts
        .par_iter()
        .map(|x0| minimize(objective, x0, &settings))
        .collect();

    let mut best: Option<(usize, &Minimum)> = None;
    for (i, res) in results.iter().enumerate() {
        match res {
            Some(m) => {
                debug!(
                    "restart {i}: lml {:.6} after {} iterations ({:?})",
                    -m.value, m.iterations, m.termination
                );
                if best.is_none_or(|(_, b)| m.value < b.value) {
                    best = Some((i, m));
                }
            }
            None => debug!("restart {i}: factorization failed at start"),
        }
    }
    let (_, winner) = best.ok_or(GprError::AllRestartsFailed)?;
    TrainedModel::condition(ts, Hyperparameters::from_slice(&winner.x))
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo.ln()..hi.ln())
}

fn random_start(rng: &mut ChaCha8Rng, d: usize, ln_scale: f64) -> Vec<f64> {
    let mut theta = Vec::with_capacity(d + 2);
    theta.push(log_uniform(rng, START_REL_SIGMA_F) + ln_scale);
    for _ in 0..d {
        theta.push(log_uniform(rng, START_LENGTHSCALE));
    }
    theta.push(log_uniform(rng, START_REL_SIGMA_N) + ln_scale);
    theta
}
