//! End-to-end experiment: features per cycle, train/test split, GP fit,
//! prediction on every retained cycle and error metrics on the test cycles.

use std::ops::Range;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{
    compute_soh, extract_cc_segment, BatteryDataset, CycleRecord, DatasetError,
    DEFAULT_CC_TOLERANCE_A,
};
use crate::gpr::{self, FitConfig, GprError, Hyperparameters, TrainedModel};
use crate::ic_analysis::{
    compute_ic, extract_features, FeatureWindow, FilterConfig, FilterMethod, IcCurve, IcError,
    DEFAULT_DV_V,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ic(#[from] IcError),
    #[error(transparent)]
    Gpr(#[from] GprError),
    #[error("not enough cycles: need {needed}, have {available}")]
    NotEnoughCycles { needed: usize, available: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("metric over an empty set")]
    Empty,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl EvalError {
    /// True for problems with the input data or configuration, as opposed to
    /// failures of the numerical pipeline itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Self::Dataset(_) | Self::NotEnoughCycles { .. } | Self::InvalidConfig(_)
        )
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// First `ceil(train_fraction * N)` cycles train, the rest test.
    Fraction { train_fraction: f64 },
    /// Skip `skip_cycles`, train on the next `train_count`, test on the rest.
    Offset {
        skip_cycles: usize,
        train_count: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QRefPolicy {
    /// Discharge capacity of the first training cycle.
    FirstTrainCycle,
    /// The dataset's rated capacity.
    Rated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub split: SplitMode,
    pub filter: FilterConfig,
    pub dv_v: f64,
    pub feature_window: FeatureWindow,
    pub q_ref_policy: QRefPolicy,
    pub cc_tolerance_a: f64,
    pub fit: FitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            split: SplitMode::Fraction {
                train_fraction: 0.55,
            },
            filter: FilterConfig::default(),
            dv_v: DEFAULT_DV_V,
            feature_window: FeatureWindow::default(),
            q_ref_policy: QRefPolicy::FirstTrainCycle,
            cc_tolerance_a: DEFAULT_CC_TOLERANCE_A,
            fit: FitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        match self.split {
            SplitMode::Fraction { train_fraction } => {
                if !(train_fraction > 0.0 && train_fraction < 1.0) {
                    return bad(format!("train_fraction {train_fraction} not in (0, 1)"));
                }
            }
            SplitMode::Offset { train_count, .. } => {
                if train_count < 2 {
                    return bad(format!("train_count {train_count} < 2"));
                }
            }
        }
        if !(self.dv_v > 0.0) {
            return bad(format!("dv_v must be positive, got {}", self.dv_v));
        }
        if !(self.cc_tolerance_a >= 0.0) {
            return bad("cc_tolerance_a must be non-negative".into());
        }
        if self.fit.restarts == 0 && self.fit.initial_points.is_empty() {
            return bad("at least one optimizer start is required".into());
        }
        self.filter
            .validate()
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
        self.feature_window
            .voltages()
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Index ranges into an ordered list of retained cycles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub skipped: Range<usize>,
    pub train: Range<usize>,
    pub test: Range<usize>,
}

/// Ranges for `n` retained cycles. Both sets must be non-empty and the
/// training set needs at least two cycles.
pub fn split_ranges(n: usize, split: &SplitMode) -> Result<SplitRanges> {
    let (skip, n_train) = match *split {
        SplitMode::Fraction { train_fraction } => {
            // guard against 0.55 * 100 = 55.000000000000007
            let t = (train_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
            (0, t)
        }
        SplitMode::Offset {
            skip_cycles,
            train_count,
        } => (skip_cycles, train_count),
    };
    let needed = skip + n_train.max(2) + 1;
    if n < needed || n_train < 2 {
        return Err(EvalError::NotEnoughCycles {
            needed,
            available: n,
        });
    }
    Ok(SplitRanges {
        skipped: 0..skip,
        train: skip..skip + n_train,
        test: skip + n_train..n,
    })
}

/// Splits an ordered list; skipped leading items belong to neither set.
pub fn split_dataset<T: Clone>(items: &[T], split: &SplitMode) -> Result<(Vec<T>, Vec<T>)> {
    let r = split_ranges(items.len(), split)?;
    Ok((items[r.train].to_vec(), items[r.test].to_vec()))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let s: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y_true.len() as f64)
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let s: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / y_true.len() as f64).sqrt())
}

/// Fraction of rows whose true SOH lies inside the predicted interval.
pub fn ci_coverage<'a>(rows: impl IntoIterator<Item = &'a ReportRow>) -> Result<f64> {
    let (mut inside, mut total) = (0usize, 0usize);
    for r in rows {
        total += 1;
        if r.ci_low <= r.true_soh && r.true_soh <= r.ci_high {
            inside += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(inside as f64 / total as f64)
}

/// Raw and filtered IC curves for one cycle.
pub fn cycle_ic(
    cycle: &CycleRecord,
    ds: &BatteryDataset,
    cfg: &ExperimentConfig,
) -> Result<(IcCurve, IcCurve)> {
    let seg = extract_cc_segment(cycle, ds.cc_current_a, cfg.cc_tolerance_a, ds.charge_cutoff_v)?;
    let raw = compute_ic(&seg, cfg.dv_v)?;
    let smooth = raw.smoothed(&cfg.filter)?;
    Ok((raw, smooth))
}

/// Health features and their target for one retained cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleFeatures {
    pub cycle_index: u32,
    pub hpi: Vec<f64>,
    pub discharge_capacity_ah: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCycle {
    pub cycle_index: u32,
    pub reason: String,
}

/// Features for every cycle that yields them; the others are reported as
/// dropped. Cycles are processed in parallel, output order follows the
/// dataset.
pub fn extract_all_features(
    ds: &BatteryDataset,
    cfg: &ExperimentConfig,
) -> (Vec<CycleFeatures>, Vec<DroppedCycle>) {
    let outcomes: Vec<Result<CycleFeatures>> = ds
        .cycles
        .par_iter()
        .map(|cycle| {
            let (_, smooth) = cycle_ic(cycle, ds, cfg)?;
            let f = extract_features(&smooth, &cfg.feature_window)?;
            Ok(CycleFeatures {
                cycle_index: cycle.cycle_index,
                hpi: f.hpi,
                discharge_capacity_ah: cycle.discharge_capacity_ah,
            })
        })
        .collect();
    let mut kept = Vec::with_capacity(outcomes.len());
    let mut dropped = Vec::new();
    for (cycle, out) in ds.cycles.iter().zip(outcomes) {
        match out {
            Ok(f) => kept.push(f),
            Err(e) => {
                warn!("dropping cycle {}: {e}", cycle.cycle_index);
                dropped.push(DroppedCycle {
                    cycle_index: cycle.cycle_index,
                    reason: e.to_string(),
                });
            }
        }
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cycle_index: u32,
    pub true_soh: f64,
    pub predicted_soh: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub in_training: bool,
    /// `(predicted - true) / true`, in percent.
    pub relative_error_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub ci_coverage_95: f64,
    pub n: usize,
}

impl Metrics {
    pub fn over<'a>(rows: impl IntoIterator<Item = &'a ReportRow> + Clone) -> Result<Self> {
        let (t, p): (Vec<f64>, Vec<f64>) =
            rows.clone().into_iter().map(|r| (r.true_soh, r.predicted_soh)).unzip();
        Ok(Self {
            mae: mae(&t, &p)?,
            rmse: rmse(&t, &p)?,
            ci_coverage_95: ci_coverage(rows)?,
            n: t.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// Test-set metrics.
    pub mae: f64,
    pub rmse: f64,
    pub ci_coverage_95: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_skipped: usize,
    pub dropped: Vec<DroppedCycle>,
    pub train_metrics: Metrics,
    pub q_ref_ah: f64,
    pub lml: f64,
    pub hyperparameters: Hyperparameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub battery_id: String,
    pub summary: ReportSummary,
    pub rows: Vec<ReportRow>,
    pub config: ExperimentConfig,
}

impl EvaluationReport {
    pub fn test_rows(&self) -> impl Iterator<Item = &ReportRow> + Clone {
        self.rows.iter().filter(|r| !r.in_training)
    }

    pub fn train_rows(&self) -> impl Iterator<Item = &ReportRow> + Clone {
        self.rows.iter().filter(|r| r.in_training)
    }
}

/// Per-cycle features with SOH targets and the split they fall into.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub features: Vec<CycleFeatures>,
    /// SOH for each entry of `features`.
    pub soh: Vec<f64>,
    pub ranges: SplitRanges,
    pub q_ref_ah: f64,
    pub dropped: Vec<DroppedCycle>,
}

pub fn build_feature_table(ds: &BatteryDataset, cfg: &ExperimentConfig) -> Result<FeatureTable> {
    let (features, dropped) = extract_all_features(ds, cfg);
    let ranges = split_ranges(features.len(), &cfg.split)?;
    let q_ref_ah = match cfg.q_ref_policy {
        QRefPolicy::FirstTrainCycle => features[ranges.train.start].discharge_capacity_ah,
        QRefPolicy::Rated => ds.rated_capacity_ah,
    };
    let soh = features
        .iter()
        .map(|f| {
            let cycle = ds.cycle(f.cycle_index).expect("features come from dataset cycles");
            compute_soh(cycle, q_ref_ah)
        })
        .collect::<Result<Vec<f64>, DatasetError>>()?;
    Ok(FeatureTable {
        features,
        soh,
        ranges,
        q_ref_ah,
        dropped,
    })
}

pub fn run_experiment(ds: &BatteryDataset, cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    run_experiment_with_model(ds, cfg).map(|(r, _)| r)
}

/// Like [`run_experiment`] but also hands back the fitted model.
pub fn run_experiment_with_model(
    ds: &BatteryDataset,
    cfg: &ExperimentConfig,
) -> Result<(EvaluationReport, TrainedModel)> {
    cfg.validate()?;
    ds.validate()?;
    if cfg.filter.method != FilterMethod::Gaussian {
        return Err(EvalError::InvalidConfig(
            "the pipeline smooths with the Gaussian filter".into(),
        ));
    }
    let FeatureTable {
        features,
        soh,
        ranges,
        q_ref_ah,
        dropped,
    } = build_feature_table(ds, cfg)?;
    let retained = &features[ranges.skipped.end..];
    let targets = &soh[ranges.skipped.end..];

    let n_train = ranges.train.len();
    let train_x: Vec<Vec<f64>> = retained[..n_train].iter().map(|f| f.hpi.clone()).collect();
    let model = gpr::fit(&train_x, &targets[..n_train], &cfg.fit)?;

    let rows = retained
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (f, &soh))| {
            let p = model.predict(&f.hpi)?;
            Ok(ReportRow {
                cycle_index: f.cycle_index,
                true_soh: soh,
                predicted_soh: p.mean,
                variance: p.variance,
                ci_low: p.ci_low,
                ci_high: p.ci_high,
                in_training: i < n_train,
                relative_error_pct: (p.mean - soh) / soh * 100.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let test = Metrics::over(rows.iter().filter(|r| !r.in_training))?;
    let train_metrics = Metrics::over(rows.iter().filter(|r| r.in_training))?;
    let summary = ReportSummary {
        mae: test.mae,
        rmse: test.rmse,
        ci_coverage_95: test.ci_coverage_95,
        n_train,
        n_test: test.n,
        n_skipped: ranges.skipped.len(),
        dropped,
        train_metrics,
        q_ref_ah,
        lml: model.lml,
        hyperparameters: model.hyper.clone(),
    };
    let report = EvaluationReport {
        battery_id: ds.battery_id.clone(),
        summary,
        rows,
        config: cfg.clone(),
    };
    Ok((report, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_split_first_55_percent() {
        let cycles: Vec<u32> = (1..=100).collect();
        let (train, test) = split_dataset(&cycles, &SplitMode::Fraction { train_fraction: 0.55 }).unwrap();
        assert_eq!(train, (1..=55).collect::<Vec<_>>());
        assert_eq!(test, (56..=100).collect::<Vec<_>>());
    }

    #[test]
    fn offset_split() {
        let cycles: Vec<u32> = (1..=168).collect();
        let split = SplitMode::Offset {
            skip_cycles: 30,
            train_count: 60,
        };
        let (train, test) = split_dataset(&cycles, &split).unwrap();
        assert_eq!(train, (31..=90).collect::<Vec<_>>());
        assert_eq!(test, (91..=168).collect::<Vec<_>>());
        let short: Vec<u32> = (1..=10).collect();
        assert!(matches!(
            split_dataset(&short, &split),
            Err(EvalError::NotEnoughCycles { .. })
        ));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[1.0, 0.9], &[1.0, 0.9]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 0.9], &[1.0, 0.9]).unwrap(), 0.0);
        assert!((mae(&[1.0, 0.9], &[1.0, 0.88]).unwrap() - 0.01).abs() < 1e-15);
        assert!((mae(&[0.8], &[0.85]).unwrap() - 0.05).abs() < 1e-15);
        assert!((rmse(&[1.0, 0.9], &[1.0, 0.88]).unwrap() - (0.0004f64 / 2.0).sqrt()).abs() < 1e-15);
        assert!((rmse(&[1.0, 0.9], &[1.0, 0.88]).unwrap() - 0.014142).abs() < 1e-6);
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2))));
        assert!(matches!(rmse(&[], &[]), Err(EvalError::Empty)));
    }

    fn row(t: f64, lo: f64, hi: f64) -> ReportRow {
        ReportRow {
            cycle_index: 1,
            true_soh: t,
            predicted_soh: t,
            variance: 0.0,
            ci_low: lo,
            ci_high: hi,
            in_training: false,
            relative_error_pct: 0.0,
        }
    }

    #[test]
    fn coverage_examples() {
        let inside = [row(0.9, 0.8, 1.0), row(0.85, 0.8, 0.9)];
        assert_eq!(ci_coverage(&inside).unwrap(), 1.0);
        let outside = [row(0.7, 0.8, 1.0), row(0.95, 0.8, 0.9)];
        assert_eq!(ci_coverage(&outside).unwrap(), 0.0);
        let mixed = [
            row(0.9, 0.8, 1.0),
            row(0.85, 0.8, 0.9),
            row(0.81, 0.8, 0.9),
            row(0.79, 0.8, 0.9),
        ];
        assert_eq!(ci_coverage(&mixed).unwrap(), 0.75);
        assert!(matches!(ci_coverage(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.split = SplitMode::Fraction { train_fraction: 1.0 };
        assert!(cfg.validate().is_err());
        cfg.split = SplitMode::Offset {
            skip_cycles: 0,
            train_count: 1,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"split": {"mode": "offset", "skip_cycles": 30, "train_count": 60}}"#)
                .unwrap();
        assert_eq!(cfg.filter, FilterConfig::default());
        assert_eq!(cfg.fit.restarts, 10);
        assert_eq!(
            cfg.split,
            SplitMode::Offset {
                skip_cycles: 30,
                train_count: 60
            }
        );
    }
}
