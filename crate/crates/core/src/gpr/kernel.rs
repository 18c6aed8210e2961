use nalgebra::{linalg::Cholesky, DMatrix, DVector, Dyn};

use super::{GprError, Hyperparameters, Result};

/// Diagonal jitter tried first.
pub const BASE_JITTER: f64 = 1e-10;
/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GprError::DimensionMismatch { expected, got })
    }
}

/// `σ_f² exp(-½ Σ_d (a_d - b_d)² / l_d²)`
pub fn kernel_ard(a: &[f64], b: &[f64], hyper: &Hyperparameters) -> Result<f64> {
    check_dim(hyper.dim(), a.len())?;
    check_dim(hyper.dim(), b.len())?;
    Ok(ard(a.iter().copied(), b.iter().copied(), hyper))
}

fn ard(
    a: impl Iterator<Item = f64>,
    b: impl Iterator<Item = f64>,
    hyper: &Hyperparameters,
) -> f64 {
    let r2: f64 = a
        .zip(b)
        .zip(&hyper.log_lengthscale)
        .map(|((x, y), ll)| {
            let z = (x - y) * (-ll).exp();
            z * z
        })
        .sum();
    let sf = hyper.sigma_f();
    sf * sf * (-0.5 * r2).exp()
}

/// Noise-free covariance `K_f` between the rows of `x`.
pub fn signal_covariance(x: &DMatrix<f64>, hyper: &Hyperparameters) -> Result<DMatrix<f64>> {
    check_dim(hyper.dim(), x.ncols())?;
    let n = x.nrows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.sigma_f() * hyper.sigma_f();
        for j in 0..i {
            let v = ard(x.row(i).iter().copied(), x.row(j).iter().copied(), hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// `K_f + (σ_n² + jitter) I` with the base jitter.
pub fn kernel_matrix(x: &DMatrix<f64>, hyper: &Hyperparameters) -> Result<DMatrix<f64>> {
    let mut k = signal_covariance(x, hyper)?;
    let noise = (2.0 * hyper.log_sigma_n).exp() + BASE_JITTER;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    Ok(k)
}

/// Cholesky factor of `φ = K_f + σ_n² I + jitter I` and the jitter it took.
pub struct Factorization {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factorization {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Factors `k_f + (noise_var + jitter) I`, escalating the jitter by decades
/// from [`BASE_JITTER`] to [`MAX_JITTER`].
pub fn factorize(k_f: &DMatrix<f64>, noise_var: f64) -> Result<Factorization> {
    if !noise_var.is_finite() || k_f.iter().any(|v| !v.is_finite()) {
        return Err(GprError::FactorizationFailure);
    }
    let steps = (MAX_JITTER / BASE_JITTER).log10().round() as i32;
    for step in 0..=steps {
        let jitter = BASE_JITTER * 10f64.powi(step);
        let mut phi = k_f.clone();
        for i in 0..phi.nrows() {
            phi[(i, i)] += noise_var + jitter;
        }
        if let Some(chol) = Cholesky::new(phi) {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(Factorization { chol, jitter });
            }
        }
    }
    Err(GprError::FactorizationFailure)
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &Hyperparameters) -> Result<()> {
    check_dim(x.nrows(), y.len())?;
    check_dim(hyper.dim(), x.ncols())?;
    hyper.check()
}

/// `-½ yᵀφ⁻¹y - ½ log|φ| - (n/2) log 2π`
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &Hyperparameters,
) -> Result<f64> {
    check_data(x, y, hyper)?;
    let k_f = signal_covariance(x, hyper)?;
    let fac = factorize(&k_f, (2.0 * hyper.log_sigma_n).exp())?;
    let alpha = fac.chol.solve(y);
    Ok(lml_from(&fac, y, &alpha))
}

fn lml_from(fac: &Factorization, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    -0.5 * y.dot(alpha) - 0.5 * fac.log_det() - 0.5 * n * LN_2PI
}

/// Gradient of the log marginal likelihood with respect to
/// `[log σ_f, log l_1 .. log l_D, log σ_n]`.
pub fn lml_gradient(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &Hyperparameters) -> Result<Vec<f64>> {
    lml_and_gradient(x, y, hyper).map(|(_, g)| g)
}

/// Value and gradient from a single factorization.
///
/// With `W = ααᵀ - φ⁻¹` each component is `½ tr(W ∂φ/∂θ)`, where
/// `∂φ/∂log σ_f = 2K_f`, `∂φ/∂log l_d = K_f ∘ Δ_d² / l_d²` and
/// `∂φ/∂log σ_n = 2σ_n² I`.
pub fn lml_and_gradient(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &Hyperparameters,
) -> Result<(f64, Vec<f64>)> {
    check_data(x, y, hyper)?;
    let n = x.nrows();
    let d = x.ncols();
    let noise_var = (2.0 * hyper.log_sigma_n).exp();
    let k_f = signal_covariance(x, hyper)?;
    let fac = factorize(&k_f, noise_var)?;
    let alpha = fac.chol.solve(y);
    let lml = lml_from(&fac, y, &alpha);

    let mut w = fac.chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);

    let inv_l2: Vec<f64> = hyper
        .log_lengthscale
        .iter()
        .map(|ll| (-2.0 * ll).exp())
        .collect();
    let mut grad = vec![0.0; d + 2];
    let mut trace_w = 0.0;
    for i in 0..n {
        trace_w += w[(i, i)];
        grad[0] += w[(i, i)] * k_f[(i, i)];
        for j in 0..i {
            // symmetric pair counted twice, halved by the ½ in front
            let wk = w[(i, j)] * k_f[(i, j)];
            grad[0] += 2.0 * wk;
            for (dim, il2) in inv_l2.iter().enumerate() {
                let delta = x[(i, dim)] - x[(j, dim)];
                grad[dim + 1] += wk * delta * delta * il2;
            }
        }
    }
    grad[d + 1] = noise_var * trace_w;
    Ok((lml, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_basics() {
        let h = Hyperparameters::new(1.0, &[1.0], 0.1);
        assert!((kernel_ard(&[0.0], &[1.0], &h).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((kernel_ard(&[0.0], &[1.0], &h).unwrap() - 0.606531).abs() < 1e-6);
        let h2 = Hyperparameters::new(1.7, &[0.3, 2.0], 0.1);
        assert_eq!(
            kernel_ard(&[0.4, -1.0], &[0.4, -1.0], &h2).unwrap(),
            h2.sigma_f() * h2.sigma_f()
        );
        assert!(matches!(
            kernel_ard(&[0.0], &[1.0, 2.0], &h2),
            Err(GprError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_point_matrix() {
        let h = Hyperparameters::new(0.8, &[1.0, 1.0], 0.3);
        let x = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
        let k = kernel_matrix(&x, &h).unwrap();
        let expected = h.sigma_f().powi(2) + h.sigma_n().powi(2) + BASE_JITTER;
        assert!((k[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn scalar_lml_closed_form() {
        let h = Hyperparameters::new(1.2, &[1.0], 0.5);
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let phi = 1.44 + 0.25;
        let base = -0.5 * f64::ln(phi) - 0.5 * LN_2PI;
        let lml0 = log_marginal_likelihood(&x, &DVector::from_vec(vec![0.0]), &h).unwrap();
        assert!((lml0 - base).abs() < 1e-9);
        let c = 0.7;
        let lml1 = log_marginal_likelihood(&x, &DVector::from_vec(vec![c]), &h).unwrap();
        assert!((lml1 - (base - c * c / (2.0 * phi))).abs() < 1e-9);
    }

    #[test]
    fn scalar_gradient_closed_form() {
        let (sf, sn, y) = (1.3, 0.4, 0.9);
        let h = Hyperparameters::new(sf, &[1.0], sn);
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let g = lml_gradient(&x, &DVector::from_vec(vec![y]), &h).unwrap();
        let phi = sf * sf + sn * sn;
        let expected = sf * sf * (y * y / (phi * phi) - 1.0 / phi);
        assert!((g[0] - expected).abs() < 1e-9);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn constant_feature_has_zero_lengthscale_gradient() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 5.0, 1.0, 5.0, 2.5, 5.0, -1.0, 5.0]);
        let y = DVector::from_vec(vec![0.1, -0.3, 0.5, 0.2]);
        let h = Hyperparameters::new(1.0, &[0.8, 1.5], 0.2);
        let g = lml_gradient(&x, &y, &h).unwrap();
        assert_eq!(g[2], 0.0);
        assert!(g[1] != 0.0);
    }

    #[test]
    fn duplicate_points_factorize() {
        let x = DMatrix::from_row_slice(3, 1, &[0.5, 0.5, 1.0]);
        let y = DVector::from_vec(vec![0.2, 0.2, -0.1]);
        let h = Hyperparameters::new(1.0, &[1.0], 1e-3);
        let x2 = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let y2 = DVector::from_vec(vec![0.2, -0.1]);
        let with_dup = log_marginal_likelihood(&x, &y, &h).unwrap();
        let without = log_marginal_likelihood(&x2, &y2, &h).unwrap();
        assert!(with_dup.is_finite() && without.is_finite());
    }

    #[test]
    fn indefinite_matrix_fails() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(factorize(&k, 0.0), Err(GprError::FactorizationFailure)));
    }
}
