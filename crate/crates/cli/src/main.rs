//! `soh`: battery state-of-health estimation from incremental-capacity
//! features.
//!
//! Exit codes: 0 success, 2 bad input or usage, 3 the computation failed.

use std::fmt::Debug;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use soh_core::dataset_io::{
    extract_cc_segment, load_dataset, write_dataset, BatteryDataset, CsvSchema, DatasetError,
};
use soh_core::evaluation::{
    build_feature_table, cycle_ic, run_experiment_with_model, EvalError, ExperimentConfig,
    QRefPolicy, SplitMode,
};
use soh_core::export::{features_csv, ic_csv, report_csv, report_json};
use soh_core::ic_analysis::{FilterConfig, FilterMethod};
use soh_core::synthetic::SyntheticConfig;

/// Usable-cycle share below which `validate` fails.
const MIN_USABLE_FRACTION: f64 = 0.8;

#[derive(Parser)]
#[command(name = "soh", version, about = "Battery SOH estimation with IC features and GP regression")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and report which cycles have a usable CC charge segment.
    Validate {
        #[command(flatten)]
        input: InputArgs,
        /// Allowed deviation from the CC setpoint, in A.
        #[arg(long)]
        cc_tolerance: Option<f64>,
    },
    /// Write raw and smoothed IC curves, one CSV per cycle.
    Ic {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated cycle indices; all cycles when omitted.
        #[arg(long, value_delimiter = ',')]
        cycles: Vec<u32>,
        /// Also write a moving-average column with this window.
        #[arg(long)]
        ma_window: Option<usize>,
    },
    /// Write the health-feature table with SOH targets.
    Features {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit on the training cycles, predict every cycle, write the report and model.
    Evaluate {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a synthetic aging battery in the default CSV layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 170)]
        cycles: u32,
        /// Noise seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Dataset CSV.
    #[arg(long)]
    input: PathBuf,
    /// JSON column mapping and cell metadata.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QRef {
    First,
    Rated,
}

/// Flags override values from `--config`, which override the defaults.
#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gaussian kernel length in samples [default: 17].
    #[arg(long)]
    filter_kernel_len: Option<usize>,
    /// Gaussian standard deviation in samples [default: 5].
    #[arg(long)]
    filter_sigma: Option<f64>,
    /// Voltage resampling step in mV [default: 1].
    #[arg(long)]
    dv_mv: Option<f64>,
    /// Train on the first fraction of cycles [default: 0.55].
    #[arg(long, conflicts_with_all = ["skip_cycles", "train_count"])]
    split_fraction: Option<f64>,
    /// Leading cycles excluded from both sets.
    #[arg(long, requires = "train_count")]
    skip_cycles: Option<usize>,
    /// Number of training cycles after the skipped ones.
    #[arg(long)]
    train_count: Option<usize>,
    /// Optimizer restarts [default: 10].
    #[arg(long)]
    restarts: Option<usize>,
    /// Restart seed [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// SOH reference capacity [default: first].
    #[arg(long, value_enum)]
    q_ref: Option<QRef>,
    /// Allowed deviation from the CC setpoint, in A [default: 0.05].
    #[arg(long)]
    cc_tolerance: Option<f64>,
}

/// A failed run: exit code plus a diagnostic.
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl Failure {
    fn input(kind: &str, message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

/// Leading identifier of a `Debug` rendering, e.g. `MissingColumn`.
fn variant_name<T: Debug>(e: &T) -> String {
    let s = format!("{e:?}");
    s.split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or("Error")
        .to_owned()
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Self::input(&variant_name(&e), e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Dataset(inner) => variant_name(inner),
            EvalError::Ic(inner) => variant_name(inner),
            EvalError::Gpr(inner) => variant_name(inner),
            other => variant_name(other),
        };
        Self {
            code: if e.is_input_error() { 2 } else { 3 },
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load(input: &InputArgs) -> CliResult<BatteryDataset> {
    let schema = match &input.schema {
        Some(p) => CsvSchema::from_json_file(p)?,
        None => CsvSchema::default(),
    };
    Ok(load_dataset(&input.input, &schema)?)
}

impl ExperimentArgs {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::input("Io", format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::input("InvalidConfig", format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(l) = self.filter_kernel_len {
            cfg.filter.kernel_len = l;
        }
        if let Some(s) = self.filter_sigma {
            cfg.filter.sigma_samples = s;
        }
        if let Some(mv) = self.dv_mv {
            cfg.dv_v = mv * 1e-3;
        }
        if let Some(f) = self.split_fraction {
            cfg.split = SplitMode::Fraction { train_fraction: f };
        }
        if let Some(t) = self.train_count {
            cfg.split = SplitMode::Offset {
                skip_cycles: self.skip_cycles.unwrap_or(0),
                train_count: t,
            };
        }
        if let Some(r) = self.restarts {
            cfg.fit.restarts = r;
        }
        if let Some(s) = self.seed {
            cfg.fit.seed = s;
        }
        if let Some(q) = self.q_ref {
            cfg.q_ref_policy = match q {
                QRef::First => QRefPolicy::FirstTrainCycle,
                QRef::Rated => QRefPolicy::Rated,
            };
        }
        if let Some(t) = self.cc_tolerance {
            cfg.cc_tolerance_a = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Writes every file to a temporary in `dir`, then renames them all into
/// place, so a failure before the renames leaves nothing behind.
fn write_outputs(dir: &Path, files: &[(String, String)]) -> CliResult {
    let io_err = |e: std::io::Error| Failure {
        code: 3,
        kind: "Io".into(),
        message: format!("{}: {e}", dir.display()),
    };
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        tmp.write_all(contents.as_bytes()).map_err(io_err)?;
        tmp.as_file().sync_all().map_err(io_err)?;
        staged.push((tmp, dir.join(name)));
    }
    for (tmp, target) in staged {
        tmp.persist(&target).map_err(|e| io_err(e.error))?;
        info!("wrote {}", target.display());
    }
    Ok(())
}

fn cmd_validate(input: &InputArgs, cc_tolerance: Option<f64>) -> CliResult {
    let ds = load(input)?;
    let tol = cc_tolerance.unwrap_or(soh_core::dataset_io::DEFAULT_CC_TOLERANCE_A);
    let mut usable = 0;
    for cycle in &ds.cycles {
        match extract_cc_segment(cycle, ds.cc_current_a, tol, ds.charge_cutoff_v) {
            Ok(seg) => {
                usable += 1;
                println!("cycle {}: ok, {} CC samples", cycle.cycle_index, seg.samples.len());
            }
            Err(e) => println!("cycle {}: unusable, {e}", cycle.cycle_index),
        }
    }
    let n = ds.cycles.len();
    println!("cycles: {n}, usable: {usable}");
    if (usable as f64) < MIN_USABLE_FRACTION * n as f64 {
        return Err(Failure::input(
            "TooFewUsableCycles",
            format!(
                "only {usable} of {n} cycles have a CC segment (need {:.0}%)",
                MIN_USABLE_FRACTION * 100.0
            ),
        ));
    }
    Ok(())
}

fn cmd_ic(
    input: &InputArgs,
    exp: &ExperimentArgs,
    out_dir: &Path,
    cycles: &[u32],
    ma_window: Option<usize>,
) -> CliResult {
    let ds = load(input)?;
    let cfg = exp.resolve()?;
    let selected: Vec<u32> = if cycles.is_empty() {
        ds.cycles.iter().map(|c| c.cycle_index).collect()
    } else {
        cycles.to_vec()
    };
    let ma_cfg = ma_window.map(|n| FilterConfig {
        method: FilterMethod::MovingAverage,
        window_n: n,
        ..FilterConfig::default()
    });
    let mut files = Vec::with_capacity(selected.len());
    for idx in selected {
        let cycle = ds
            .cycle(idx)
            .ok_or_else(|| Failure::input("UnknownCycle", format!("unknown cycle index {idx}")))?;
        let (raw, smooth) = cycle_ic(cycle, &ds, &cfg)?;
        let ma = match &ma_cfg {
            Some(c) => Some(raw.smoothed(c).map_err(EvalError::from)?),
            None => None,
        };
        files.push((format!("ic_cycle_{idx:04}.csv"), ic_csv(&raw, &smooth, ma.as_ref())));
    }
    write_outputs(out_dir, &files)?;
    println!("wrote {} IC curve file(s) to {}", files.len(), out_dir.display());
    Ok(())
}

fn cmd_features(input: &InputArgs, exp: &ExperimentArgs, out_dir: &Path) -> CliResult {
    let ds = load(input)?;
    let cfg = exp.resolve()?;
    let table = build_feature_table(&ds, &cfg)?;
    for d in &table.dropped {
        warn!("cycle {} dropped: {}", d.cycle_index, d.reason);
    }
    write_outputs(out_dir, &[("features.csv".into(), features_csv(&table))])?;
    println!(
        "features: {} cycles, dropped: {}",
        table.features.len(),
        table.dropped.len()
    );
    Ok(())
}

fn cmd_evaluate(input: &InputArgs, exp: &ExperimentArgs, out_dir: &Path) -> CliResult {
    let ds = load(input)?;
    let cfg = exp.resolve()?;
    let (report, model) = run_experiment_with_model(&ds, &cfg)?;
    let mut model_json = model.to_json();
    model_json.push('\n');
    write_outputs(
        out_dir,
        &[
            ("report.json".into(), report_json(&report)),
            ("report.csv".into(), report_csv(&report)),
            ("model.json".into(), model_json),
        ],
    )?;
    let s = &report.summary;
    println!(
        "battery {}: n_train {}, n_test {}, dropped {}",
        report.battery_id,
        s.n_train,
        s.n_test,
        s.dropped.len()
    );
    println!(
        "mae: {:.6}, rmse: {:.6}, ci_coverage_95: {:.4}",
        s.mae, s.rmse, s.ci_coverage_95
    );
    Ok(())
}

fn cmd_synth(out: &Path, cycles: u32, seed: u64) -> CliResult {
    if cycles == 0 {
        return Err(Failure::input("InvalidConfig", "--cycles must be at least 1"));
    }
    let ds = SyntheticConfig {
        cycles,
        seed,
        ..SyntheticConfig::default()
    }
    .generate();
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf)?;
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = out
        .file_name()
        .ok_or_else(|| Failure::input("InvalidPath", format!("{} is not a file path", out.display())))?
        .to_string_lossy()
        .into_owned();
    write_outputs(dir, &[(name, String::from_utf8(buf).expect("CSV is UTF-8"))])?;
    println!("wrote {cycles} synthetic cycles to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Validate {
            input,
            cc_tolerance,
        } => cmd_validate(input, *cc_tolerance),
        Command::Ic {
            input,
            exp,
            out_dir,
            cycles,
            ma_window,
        } => cmd_ic(input, exp, out_dir, cycles, *ma_window),
        Command::Features {
            input,
            exp,
            out_dir,
        } => cmd_features(input, exp, out_dir),
        Command::Evaluate {
            input,
            exp,
            out_dir,
        } => cmd_evaluate(input, exp, out_dir),
        Command::Synth { out, cycles, seed } => cmd_synth(out, *cycles, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "message": f.message });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}
