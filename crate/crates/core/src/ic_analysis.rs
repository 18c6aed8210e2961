//! Incremental-capacity (dQ/dV) curves and the fixed-voltage health features
//! read from them.
//!
//! The pipeline for one cycle is
//! `ChargeSegment -> (V grid, Q) -> raw dQ/dV -> Gaussian smoothing -> features`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::ChargeSegment;

/// Default resampling step of the voltage grid, in volts.
pub const DEFAULT_DV_V: f64 = 1e-3;

/// Number of health features in the default window.
pub const NUM_FEATURES: usize = 11;

const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcError {
    #[error("voltage span {span_v:.4} V is shorter than ten resampling steps")]
    DegenerateVoltageRange { span_v: f64 },
    #[error("resampling step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("moving-average window {window} exceeds signal length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("kernel length {kernel_len} exceeds signal length {len}")]
    KernelTooLong { kernel_len: usize, len: usize },
    #[error("invalid filter configuration: {0}")]
    InvalidFilter(String),
    #[error(
        "IC grid covers [{covered_lo:.4}, {covered_hi:.4}] V but the feature window needs [{needed_lo:.4}, {needed_hi:.4}] V"
    )]
    GridDoesNotCoverWindow {
        covered_lo: f64,
        covered_hi: f64,
        needed_lo: f64,
        needed_hi: f64,
    },
    #[error("invalid feature window: {0}")]
    InvalidWindow(String),
    #[error("non-finite IC value at {0} V")]
    NonFinite(f64),
}

pub type Result<T, E = IcError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    MovingAverage,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub method: FilterMethod,
    pub window_n: usize,
    /// Gaussian taps; must be odd.
    pub kernel_len: usize,
    /// Gaussian standard deviation in samples.
    pub sigma_samples: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            method: FilterMethod::Gaussian,
            window_n: 10,
            kernel_len: 17,
            sigma_samples: 5.0,
        }
    }
}

impl FilterConfig {
    pub fn gaussian(kernel_len: usize, sigma_samples: f64) -> Self {
        Self {
            method: FilterMethod::Gaussian,
            kernel_len,
            sigma_samples,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_n == 0 {
            return Err(IcError::InvalidFilter("window_n must be at least 1".into()));
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(IcError::InvalidFilter(format!(
                "kernel_len must be odd, got {}",
                self.kernel_len
            )));
        }
        if !(self.sigma_samples > 0.0) || !self.sigma_samples.is_finite() {
            return Err(IcError::InvalidFilter(format!(
                "sigma_samples must be positive, got {}",
                self.sigma_samples
            )));
        }
        Ok(())
    }
}

/// dQ/dV on a uniform voltage grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IcCurve {
    pub cycle_index: u32,
    pub voltage_grid_v: Vec<f64>,
    pub dq_dv_ah_per_v: Vec<f64>,
    /// `None` for a raw curve.
    pub smoothing: Option<FilterConfig>,
}

impl IcCurve {
    pub fn step_v(&self) -> f64 {
        self.voltage_grid_v[1] - self.voltage_grid_v[0]
    }

    /// Applies `cfg` to the dQ/dV values. Moving-average output is shorter
    /// than the input, so the grid is cut to match.
    pub fn smoothed(&self, cfg: &FilterConfig) -> Result<IcCurve> {
        let (grid, values) = match cfg.method {
            FilterMethod::Gaussian => (
                self.voltage_grid_v.clone(),
                gaussian_smooth(&self.dq_dv_ah_per_v, cfg)?,
            ),
            FilterMethod::MovingAverage => {
                let v = moving_average(&self.dq_dv_ah_per_v, cfg.window_n)?;
                (self.voltage_grid_v[..v.len()].to_vec(), v)
            }
        };
        Ok(IcCurve {
            cycle_index: self.cycle_index,
            voltage_grid_v: grid,
            dq_dv_ah_per_v: values,
            smoothing: Some(*cfg),
        })
    }
}

/// Uniform voltage grid with the charged capacity at each node.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityOnVoltage {
    pub voltage_grid_v: Vec<f64>,
    pub capacity_ah: Vec<f64>,
}

/// Resamples charged capacity onto a uniform voltage grid with step `dv_v`.
///
/// Charge is `I * t / 3600`. The voltage trace is rectified with a running
/// maximum, then capacity is linearly interpolated at each grid node between
/// the first and last rectified voltage.
pub fn resample_capacity_on_voltage(seg: &ChargeSegment, dv_v: f64) -> Result<CapacityOnVoltage> {
    if !(dv_v > 0.0) || !dv_v.is_finite() {
        return Err(IcError::InvalidStep(dv_v));
    }
    let mut volts = Vec::with_capacity(seg.samples.len());
    let mut charge = Vec::with_capacity(seg.samples.len());
    let mut running = f64::NEG_INFINITY;
    for s in &seg.samples {
        running = running.max(s.voltage_v);
        volts.push(running);
        charge.push(seg.cc_current_a * s.time_s / 3600.0);
    }
    let (Some(&v_lo), Some(&v_hi)) = (volts.first(), volts.last()) else {
        return Err(IcError::DegenerateVoltageRange { span_v: 0.0 });
    };
    let span_v = v_hi - v_lo;
    if span_v < 10.0 * dv_v {
        return Err(IcError::DegenerateVoltageRange { span_v });
    }

    let k_lo = (v_lo / dv_v - GRID_EPS).ceil() as i64;
    let k_hi = (v_hi / dv_v + GRID_EPS).floor() as i64;
    let mut grid = Vec::with_capacity((k_hi - k_lo + 1).max(0) as usize);
    let mut q = Vec::with_capacity(grid.capacity());
    for k in k_lo..=k_hi {
        let v = (k as f64 * dv_v).clamp(v_lo, v_hi);
        // first sample at or above v; the one before it is strictly below
        let j = volts.partition_point(|&x| x < v);
        let qv = if j == 0 {
            charge[0]
        } else if j == volts.len() {
            charge[j - 1]
        } else {
            let i = j - 1;
            let frac = (v - volts[i]) / (volts[j] - volts[i]);
            charge[i] + frac * (charge[j] - charge[i])
        };
        grid.push(k as f64 * dv_v);
        q.push(qv);
    }
    Ok(CapacityOnVoltage {
        voltage_grid_v: grid,
        capacity_ah: q,
    })
}

/// Raw IC curve by central differences of the resampled capacity, with
/// one-sided differences at both ends.
pub fn compute_ic(seg: &ChargeSegment, dv_v: f64) -> Result<IcCurve> {
    let CapacityOnVoltage {
        voltage_grid_v,
        capacity_ah: q,
    } = resample_capacity_on_voltage(seg, dv_v)?;
    let n = q.len();
    let mut dq_dv = Vec::with_capacity(n);
    dq_dv.push((q[1] - q[0]) / dv_v);
    for k in 1..n - 1 {
        dq_dv.push((q[k + 1] - q[k - 1]) / (2.0 * dv_v));
    }
    dq_dv.push((q[n - 1] - q[n - 2]) / dv_v);
    if let Some(k) = dq_dv.iter().position(|d| !d.is_finite()) {
        return Err(IcError::NonFinite(voltage_grid_v[k]));
    }
    Ok(IcCurve {
        cycle_index: seg.cycle_index,
        voltage_grid_v,
        dq_dv_ah_per_v: dq_dv,
        smoothing: None,
    })
}

/// Forward window mean: `out[i] = mean(values[i..i + window_n])`.
pub fn moving_average(values: &[f64], window_n: usize) -> Result<Vec<f64>> {
    if window_n == 0 {
        return Err(IcError::InvalidFilter("window_n must be at least 1".into()));
    }
    if window_n > values.len() {
        return Err(IcError::WindowTooLarge {
            window: window_n,
            len: values.len(),
        });
    }
    let n = window_n as f64;
    Ok(values
        .windows(window_n)
        .map(|w| w.iter().sum::<f64>() / n)
        .collect())
}

/// Normalized discrete Gaussian taps, `w[j] ∝ exp(-j² / 2σ²)` for
/// `j = -(L-1)/2 ..= (L-1)/2`.
pub fn gaussian_kernel(kernel_len: usize, sigma_samples: f64) -> Vec<f64> {
    let half = (kernel_len / 2) as i64;
    let two_var = 2.0 * sigma_samples * sigma_samples;
    let raw: Vec<f64> = (-half..=half)
        .map(|j| (-((j * j) as f64) / two_var).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Gaussian smoothing with the kernel truncated and renormalized at the
/// boundaries. Output has the same length as the input.
pub fn gaussian_smooth(values: &[f64], cfg: &FilterConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.kernel_len > values.len() {
        return Err(IcError::KernelTooLong {
            kernel_len: cfg.kernel_len,
            len: values.len(),
        });
    }
    let kernel = gaussian_kernel(cfg.kernel_len, cfg.sigma_samples);
    let half = cfg.kernel_len / 2;
    let n = values.len();
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            // weighted mean of deviations from the centre sample, so a
            // constant signal comes back bit-for-bit
            let centre = values[i];
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (idx, &v) in values.iter().enumerate().take(hi + 1).skip(lo) {
                let w = kernel[idx + half - i];
                acc += w * (v - centre);
                norm += w;
            }
            centre + acc / norm
        })
        .collect();
    Ok(out)
}

/// Voltages at which features are read: `start_v + k * step_v` up to `end_v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub start_v: f64,
    pub end_v: f64,
    pub step_v: f64,
}

impl Default for FeatureWindow {
    fn default() -> Self {
        Self {
            start_v: 3.80,
            end_v: 4.10,
            step_v: 0.03,
        }
    }
}

impl FeatureWindow {
    pub fn voltages(&self) -> Result<Vec<f64>> {
        if !(self.step_v > 0.0) || !(self.end_v >= self.start_v) {
            return Err(IcError::InvalidWindow(format!("{self:?}")));
        }
        let count = ((self.end_v - self.start_v) / self.step_v).round() as usize + 1;
        Ok((0..count)
            .map(|k| self.start_v + self.step_v * k as f64)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthFeatureVector {
    pub cycle_index: u32,
    /// dQ/dV in Ah/V at each window voltage.
    pub hpi: Vec<f64>,
}

/// Reads dQ/dV at each window voltage by linear interpolation.
pub fn extract_features(curve: &IcCurve, window: &FeatureWindow) -> Result<HealthFeatureVector> {
    let at = window.voltages()?;
    let grid = &curve.voltage_grid_v;
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let (need_lo, need_hi) = (at[0], at[at.len() - 1]);
    if lo > need_lo + GRID_EPS || hi < need_hi - GRID_EPS {
        return Err(IcError::GridDoesNotCoverWindow {
            covered_lo: lo,
            covered_hi: hi,
            needed_lo: need_lo,
            needed_hi: need_hi,
        });
    }
    let values = &curve.dq_dv_ah_per_v;
    let hpi = at
        .iter()
        .map(|&v| {
            let v = v.clamp(lo, hi);
            let j = grid.partition_point(|&g| g < v);
            let f = if j == 0 {
                values[0]
            } else {
                let i = j - 1;
                let frac = (v - grid[i]) / (grid[j] - grid[i]);
                values[i] + frac * (values[j] - values[i])
            };
            if f.is_finite() {
                Ok(f)
            } else {
                Err(IcError::NonFinite(v))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HealthFeatureVector {
        cycle_index: curve.cycle_index,
        hpi,
    })
}

/// Trapezoidal integral of dQ/dV over the grid.
pub fn integrate_ic(curve: &IcCurve) -> f64 {
    curve
        .voltage_grid_v
        .windows(2)
        .zip(curve.dq_dv_ah_per_v.windows(2))
        .map(|(v, d)| 0.5 * (d[0] + d[1]) * (v[1] - v[0]))
        .sum()
}
