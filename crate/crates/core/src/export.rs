//! Plot-ready CSV and JSON renderings. Every function returns the full file
//! contents so callers decide how to write them.

use std::fmt::Write as _;

use crate::evaluation::{EvaluationReport, FeatureTable};
use crate::ic_analysis::IcCurve;

pub const REPORT_COLUMNS: [&str; 8] = [
    "cycle_index",
    "true_soh",
    "predicted_soh",
    "variance",
    "ci_low",
    "ci_high",
    "in_training",
    "relative_error_pct",
];

pub fn report_csv(report: &EvaluationReport) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.cycle_index,
            r.true_soh,
            r.predicted_soh,
            r.variance,
            r.ci_low,
            r.ci_high,
            r.in_training,
            r.relative_error_pct
        )
        .unwrap();
    }
    out
}

pub fn report_json(report: &EvaluationReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// `cycle_index,hpi_1..hpi_K,soh`
pub fn features_csv(table: &FeatureTable) -> String {
    let k = table.features.first().map_or(0, |f| f.hpi.len());
    let mut out = String::from("cycle_index");
    for i in 1..=k {
        write!(out, ",hpi_{i}").unwrap();
    }
    out.push_str(",soh\n");
    for (f, soh) in table.features.iter().zip(&table.soh) {
        write!(out, "{}", f.cycle_index).unwrap();
        for h in &f.hpi {
            write!(out, ",{h}").unwrap();
        }
        writeln!(out, ",{soh}").unwrap();
    }
    out
}

/// `voltage_V,dq_dv_raw,dq_dv_gaussian[,dq_dv_ma]`. The moving-average column
/// is shorter than the grid; its trailing cells are left empty.
pub fn ic_csv(raw: &IcCurve, gaussian: &IcCurve, moving_average: Option<&IcCurve>) -> String {
    let mut out = String::from("voltage_V,dq_dv_raw,dq_dv_gaussian");
    if moving_average.is_some() {
        out.push_str(",dq_dv_ma");
    }
    out.push('\n');
    for (i, v) in raw.voltage_grid_v.iter().enumerate() {
        write!(
            out,
            "{v},{},{}",
            raw.dq_dv_ah_per_v[i], gaussian.dq_dv_ah_per_v[i]
        )
        .unwrap();
        if let Some(ma) = moving_average {
            out.push(',');
            if let Some(m) = ma.dq_dv_ah_per_v.get(i) {
                write!(out, "{m}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}
