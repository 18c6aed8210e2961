use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn soh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path, cycles: u32) -> PathBuf {
    let path = dir.join("battery.csv");
    let out = soh(&["synth", "--out", path.to_str().unwrap(), "--cycles", &cycles.to_string()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn validate_reports_usable_cycles() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 12);
    let out = soh(&["validate", "--input", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l == "cycles: 12, usable: 12"), "{text}");
}

#[test]
fn validate_names_missing_column() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.csv");
    std::fs::write(
        &path,
        "battery_id,cycle_index,phase,time_s,current_A,discharge_capacity_Ah\nB,1,charge,0,1.5,2\n",
    )
    .unwrap();
    let out = soh(&["validate", "--input", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("voltage_V"), "{}", stderr(&out));
}

#[test]
fn validate_rejects_empty_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("empty.csv");
    std::fs::write(
        &path,
        "battery_id,cycle_index,phase,time_s,voltage_V,current_A,discharge_capacity_Ah\n",
    )
    .unwrap();
    let out = soh(&["validate", "--input", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("EmptyDataset"), "{}", stderr(&out));
}

#[test]
fn ic_writes_one_file_per_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 70);
    let one = tmp.path().join("one");
    let out = soh(&[
        "ic", "--input", data.to_str().unwrap(), "--out-dir", one.to_str().unwrap(),
        "--cycles", "1", "--ma-window", "10",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(one.join("ic_cycle_0001.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "voltage_V,dq_dv_raw,dq_dv_gaussian,dq_dv_ma");
    assert!(text.lines().all(|l| l.split(',').count() == 4));

    let three = tmp.path().join("three");
    let out = soh(&[
        "ic", "--input", data.to_str().unwrap(), "--out-dir", three.to_str().unwrap(),
        "--cycles", "1,31,61",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(files_in(&three).len(), 3);
}

#[test]
fn ic_unknown_cycle_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 5);
    let dir = tmp.path().join("out");
    let out = soh(&[
        "ic", "--input", data.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(),
        "--cycles", "1,9999",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("9999"));
    assert!(files_in(&dir).is_empty());
}

#[test]
fn conflicting_split_flags_are_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 5);
    let out = soh(&[
        "evaluate", "--input", data.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap(),
        "--split-fraction", "0.55", "--skip-cycles", "30", "--train-count", "60",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_writes_report_and_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 40);
    let dir = tmp.path().join("eval");
    let out = soh(&[
        "evaluate", "--input", data.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(),
        "--restarts", "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(files_in(&dir), ["model.json", "report.csv", "report.json"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rmse:"));
    let model = std::fs::read_to_string(dir.join("model.json")).unwrap();
    soh_core::gpr::TrainedModel::from_json(&model).unwrap();
}

#[test]
fn offset_split_and_rated_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 40);
    let dir = tmp.path().join("eval");
    let out = soh(&[
        "evaluate", "--input", data.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(),
        "--skip-cycles", "5", "--train-count", "20", "--q-ref", "rated", "--restarts", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["n_train"], 20);
    assert_eq!(report["summary"]["n_test"], 15);
    assert_eq!(report["summary"]["q_ref_ah"], 2.0);
}

#[test]
fn too_few_cycles_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3);
    let dir = tmp.path().join("eval");
    let out = soh(&[
        "evaluate", "--input", data.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(),
        "--train-count", "10",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("NotEnoughCycles"));
    assert!(files_in(&dir).is_empty());
}

#[test]
fn features_table_and_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 10);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"split": {"mode": "fraction", "train_fraction": 0.5}}"#).unwrap();
    let dir = tmp.path().join("feat");
    let out = soh(&[
        "features", "--input", data.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.join("features.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);

    std::fs::write(&cfg, r#"{"split": {"mode": "fraction", "train_fraction": 1.5}}"#).unwrap();
    let out = soh(&[
        "features", "--input", data.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(),
        "--config", cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
