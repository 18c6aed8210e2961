//! Exact Gaussian process regression with an ARD squared-exponential kernel.
//!
//! Hyperparameters live in log space. Training maximizes the log marginal
//! likelihood from several starting points with L-BFGS and keeps the best
//! optimum; prediction returns the posterior mean, the predictive variance
//! (noise included) and a 95% interval.

mod kernel;
mod model;
pub mod optimize;

pub use kernel::{
    factorize, kernel_ard, kernel_matrix, lml_and_gradient, lml_gradient,
    log_marginal_likelihood, signal_covariance, Factorization, BASE_JITTER, MAX_JITTER,
};
pub use model::{fit, FitConfig, ModelDocument, PosteriorPrediction, TrainedModel, MODEL_FORMAT_VERSION};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// z-value of a two-sided 95% Gaussian interval.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GprError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance matrix is not positive definite even with jitter {MAX_JITTER:e}")]
    FactorizationFailure,
    #[error("every optimizer restart failed")]
    AllRestartsFailed,
    #[error("feature {0} is constant over the training set")]
    ConstantFeature(usize),
    #[error("need at least 2 training points, got {0}")]
    TooFewPoints(usize),
    #[error("training data contains non-finite values")]
    NonFinite,
    #[error("hyperparameters must be finite")]
    InvalidHyperparameters,
    #[error("model document: {0}")]
    Document(String),
}

pub type Result<T, E = GprError> = std::result::Result<T, E>;

/// Kernel and noise parameters, all as natural logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub log_sigma_f: f64,
    pub log_lengthscale: Vec<f64>,
    pub log_sigma_n: f64,
}

impl Hyperparameters {
    pub fn new(sigma_f: f64, lengthscales: &[f64], sigma_n: f64) -> Self {
        Self {
            log_sigma_f: sigma_f.ln(),
            log_lengthscale: lengthscales.iter().map(|l| l.ln()).collect(),
            log_sigma_n: sigma_n.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscale.len()
    }

    pub fn sigma_f(&self) -> f64 {
        self.log_sigma_f.exp()
    }

    pub fn sigma_n(&self) -> f64 {
        self.log_sigma_n.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscale.iter().map(|l| l.exp()).collect()
    }

    /// Packs as `[log σ_f, log l_1 .. log l_D, log σ_n]`, the gradient order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.log_sigma_f);
        v.extend_from_slice(&self.log_lengthscale);
        v.push(self.log_sigma_n);
        v
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        let n = theta.len();
        Self {
            log_sigma_f: theta[0],
            log_lengthscale: theta[1..n - 1].to_vec(),
            log_sigma_n: theta[n - 1],
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.to_vec().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GprError::InvalidHyperparameters)
        }
    }
}

/// Per-feature z-scoring plus target centering, frozen at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            feature_mean: vec![0.0; dim],
            feature_std: vec![1.0; dim],
            target_mean: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(GprError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

/// Standardized inputs and centered targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub standardizer: Standardizer,
}

impl TrainingSet {
    /// Estimates the standardizer from the data (population statistics).
    pub fn new(raw_x: &[Vec<f64>], raw_y: &[f64]) -> Result<Self> {
        let (n, d) = check_shape(raw_x, raw_y)?;
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let m = raw_x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = raw_x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            if !(s > 1e-12 * (1.0 + m.abs())) {
                return Err(GprError::ConstantFeature(j));
            }
            mean[j] = m;
            std[j] = s;
        }
        let target_mean = raw_y.iter().sum::<f64>() / n as f64;
        let standardizer = Standardizer {
            feature_mean: mean,
            feature_std: std,
            target_mean,
        };
        Self::with_standardizer(raw_x, raw_y, standardizer)
    }

    /// Applies a given standardizer instead of estimating one.
    pub fn with_standardizer(
        raw_x: &[Vec<f64>],
        raw_y: &[f64],
        standardizer: Standardizer,
    ) -> Result<Self> {
        let (n, d) = check_shape(raw_x, raw_y)?;
        if standardizer.dim() != d {
            return Err(GprError::DimensionMismatch {
                expected: standardizer.dim(),
                got: d,
            });
        }
        let mut x = DMatrix::zeros(n, d);
        for (i, row) in raw_x.iter().enumerate() {
            for (j, v) in standardizer.transform(row)?.into_iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        let y = DVector::from_iterator(n, raw_y.iter().map(|v| v - standardizer.target_mean));
        Ok(Self {
            x,
            y,
            standardizer,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

fn check_shape(raw_x: &[Vec<f64>], raw_y: &[f64]) -> Result<(usize, usize)> {
    let n = raw_x.len();
    if n != raw_y.len() {
        return Err(GprError::DimensionMismatch {
            expected: n,
            got: raw_y.len(),
        });
    }
    if n < 2 {
        return Err(GprError::TooFewPoints(n));
    }
    let d = raw_x[0].len();
    for row in raw_x {
        if row.len() != d {
            return Err(GprError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(GprError::NonFinite);
        }
    }
    if raw_y.iter().any(|v| !v.is_finite()) {
        return Err(GprError::NonFinite);
    }
    Ok((n, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyper_pack_roundtrip() {
        let h = Hyperparameters::new(0.5, &[1.0, 2.0, 3.0], 0.01);
        assert_eq!(Hyperparameters::from_slice(&h.to_vec()), h);
        assert_eq!(h.to_vec().len(), 5);
    }

    #[test]
    fn standardizes_columns() {
        let x = vec![vec![1.0, 10.0], vec![3.0, 30.0], vec![5.0, 20.0]];
        let ts = TrainingSet::new(&x, &[1.0, 2.0, 3.0]).unwrap();
        for j in 0..2 {
            let col = ts.x.column(j);
            assert!(col.mean().abs() < 1e-14);
            assert!((col.map(|v| v * v).mean() - 1.0).abs() < 1e-12);
        }
        assert_eq!(ts.y.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_constant_feature() {
        let x = vec![vec![1.0, 7.0], vec![2.0, 7.0]];
        assert_eq!(
            TrainingSet::new(&x, &[0.0, 1.0]).unwrap_err(),
            GprError::ConstantFeature(1)
        );
    }

    #[test]
    fn rejects_single_point_and_nan() {
        assert_eq!(
            TrainingSet::new(&[vec![1.0]], &[0.0]).unwrap_err(),
            GprError::TooFewPoints(1)
        );
        assert_eq!(
            TrainingSet::new(&[vec![1.0], vec![f64::NAN]], &[0.0, 1.0]).unwrap_err(),
            GprError::NonFinite
        );
    }
}
