//! Loading, validation and segmentation of per-cycle battery test logs.
//!
//! The ingestion format is a flat CSV with one row per sample:
//!
//! ```text
//! battery_id,cycle_index,phase,time_s,voltage_V,current_A,discharge_capacity_Ah
//! B0005,1,charge,0.0,3.87,1.5,1.856
//! ...
//! ```
//!
//! `phase` is one of `charge`, `discharge` or `impedance`. Only charge rows
//! become [`SamplePoint`]s; the other phases only contribute the per-cycle
//! discharge capacity. A [`CsvSchema`] (loadable from JSON) renames columns and
//! carries the cell metadata that the log itself does not record.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum number of samples in a usable constant-current segment.
pub const MIN_SEGMENT_SAMPLES: usize = 20;

/// Default half-width of the constant-current band, in amperes.
pub const DEFAULT_CC_TOLERANCE_A: f64 = 0.05;

const CUTOFF_SLACK_V: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("time is not strictly increasing in cycle {0}")]
    NonMonotonicTime(u32),
    #[error("negative time in cycle {0}")]
    NegativeTime(u32),
    #[error("discharge capacity of cycle {0} is not positive")]
    NegativeCapacity(u32),
    #[error("cycle {0} has no discharge capacity")]
    MissingCapacity(u32),
    #[error("conflicting discharge capacities within cycle {0}")]
    InconsistentCapacity(u32),
    #[error("voltage {voltage} V outside the (0, 10) V window in cycle {cycle}")]
    VoltageOutOfRange { cycle: u32, voltage: f64 },
    #[error("cycle index must be positive (row {row})")]
    InvalidCycleIndex { row: usize },
    #[error("more than one battery_id in file: `{0}` and `{1}`")]
    MixedBatteries(String, String),
    #[error("unknown phase `{value}` at row {row}")]
    UnknownPhase { row: usize, value: String },
    #[error("cannot parse `{value}` in column `{column}` at row {row}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("dataset contains no cycles")]
    EmptyDataset,
    #[error("constant-current segment of cycle {0} has fewer than {MIN_SEGMENT_SAMPLES} samples")]
    SegmentTooShort(u32),
    #[error("reference capacity must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// One logged sample. Current is signed with charge positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub time_s: f64,
    pub voltage_v: f64,
    pub current_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_index: u32,
    /// Charge-phase samples in log order.
    pub samples: Vec<SamplePoint>,
    pub discharge_capacity_ah: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryDataset {
    pub battery_id: String,
    pub rated_capacity_ah: f64,
    pub cc_current_a: f64,
    pub charge_cutoff_v: f64,
    pub cycles: Vec<CycleRecord>,
}

impl BatteryDataset {
    pub fn cycle(&self, cycle_index: u32) -> Option<&CycleRecord> {
        self.cycles
            .binary_search_by_key(&cycle_index, |c| c.cycle_index)
            .ok()
            .map(|i| &self.cycles[i])
    }

    /// Checks the dataset-level invariants. Loaders call this; it is public
    /// so hand-built datasets (e.g. synthetic ones) can be checked too.
    pub fn validate(&self) -> Result<()> {
        if self.cycles.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        if !(self.rated_capacity_ah > 0.0) || !(self.cc_current_a > 0.0) {
            return Err(DatasetError::Schema(
                "rated capacity and CC current must be positive".into(),
            ));
        }
        let mut prev_index = 0;
        for cycle in &self.cycles {
            if cycle.cycle_index <= prev_index {
                return Err(DatasetError::Schema(format!(
                    "cycle indices not strictly increasing at {}",
                    cycle.cycle_index
                )));
            }
            prev_index = cycle.cycle_index;
            validate_cycle(cycle)?;
        }
        Ok(())
    }
}

fn validate_cycle(cycle: &CycleRecord) -> Result<()> {
    let id = cycle.cycle_index;
    if !(cycle.discharge_capacity_ah > 0.0) {
        return Err(DatasetError::NegativeCapacity(id));
    }
    let mut prev_t = f64::NEG_INFINITY;
    for s in &cycle.samples {
        if s.time_s < 0.0 {
            return Err(DatasetError::NegativeTime(id));
        }
        if !(s.time_s > prev_t) {
            return Err(DatasetError::NonMonotonicTime(id));
        }
        prev_t = s.time_s;
        if !(s.voltage_v > 0.0 && s.voltage_v < 10.0) {
            return Err(DatasetError::VoltageOutOfRange {
                cycle: id,
                voltage: s.voltage_v,
            });
        }
        if !s.current_a.is_finite() {
            return Err(DatasetError::Schema(format!(
                "non-finite current in cycle {id}"
            )));
        }
    }
    Ok(())
}

/// Column names plus the cell metadata that is not part of the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub battery_id: String,
    pub cycle_index: String,
    pub phase: String,
    pub time_s: String,
    pub voltage_v: String,
    pub current_a: String,
    pub discharge_capacity_ah: String,
    /// Set when the source logs charging current as negative.
    pub negate_current: bool,
    pub rated_capacity_ah: f64,
    pub cc_current_a: f64,
    pub charge_cutoff_v: f64,
    /// Optional per-cycle CSV (`cycle_index,discharge_capacity_Ah`) used
    /// instead of the repeated capacity column. Relative paths resolve
    /// against the data file's directory.
    pub capacity_sidecar: Option<PathBuf>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            battery_id: "battery_id".into(),
            cycle_index: "cycle_index".into(),
            phase: "phase".into(),
            time_s: "time_s".into(),
            voltage_v: "voltage_V".into(),
            current_a: "current_A".into(),
            discharge_capacity_ah: "discharge_capacity_Ah".into(),
            negate_current: false,
            rated_capacity_ah: 2.0,
            cc_current_a: 1.5,
            charge_cutoff_v: 4.2,
            capacity_sidecar: None,
        }
    }
}

impl CsvSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Schema(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Charge,
    Discharge,
    Impedance,
}

impl Phase {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "charge" => Some(Self::Charge),
            "discharge" => Some(Self::Discharge),
            "impedance" => Some(Self::Impedance),
            _ => None,
        }
    }
}

#[derive(Default)]
struct CycleAccumulator {
    samples: Vec<SamplePoint>,
    capacity: Option<f64>,
}

struct Columns {
    battery_id: usize,
    cycle_index: usize,
    phase: usize,
    time_s: usize,
    voltage_v: usize,
    current_a: usize,
    capacity: Option<usize>,
}

fn locate(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DatasetError::MissingColumn(name.to_owned()))
}

fn field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    row: usize,
) -> Result<T> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| DatasetError::Parse {
        row,
        column: column.to_owned(),
        value: raw.to_owned(),
    })
}

/// Loads and validates a dataset file.
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<BatteryDataset> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    let sidecar = match &schema.capacity_sidecar {
        Some(p) => {
            let p = if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p.clone()
            };
            Some(load_capacity_sidecar(&p)?)
        }
        None => None,
    };
    read_dataset(file, schema, sidecar.as_ref())
}

/// Reads a `cycle_index,discharge_capacity_Ah` sidecar file.
pub fn load_capacity_sidecar(path: &Path) -> Result<BTreeMap<u32, f64>> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let ci = locate(&headers, "cycle_index")?;
    let qi = locate(&headers, "discharge_capacity_Ah")?;
    let mut out = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cycle: u32 = field(&record, ci, "cycle_index", row + 1)?;
        let q: f64 = field(&record, qi, "discharge_capacity_Ah", row + 1)?;
        out.insert(cycle, q);
    }
    Ok(out)
}

/// Parses a dataset from any reader. `sidecar` overrides the capacity column.
pub fn read_dataset<R: Read>(
    reader: R,
    schema: &CsvSchema,
    sidecar: Option<&BTreeMap<u32, f64>>,
) -> Result<BatteryDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = reader.headers()?.clone();
    let cols = Columns {
        battery_id: locate(&headers, &schema.battery_id)?,
        cycle_index: locate(&headers, &schema.cycle_index)?,
        phase: locate(&headers, &schema.phase)?,
        time_s: locate(&headers, &schema.time_s)?,
        voltage_v: locate(&headers, &schema.voltage_v)?,
        current_a: locate(&headers, &schema.current_a)?,
        capacity: match sidecar {
            Some(_) => None,
            None => Some(locate(&headers, &schema.discharge_capacity_ah)?),
        },
    };

    let mut battery_id: Option<String> = None;
    let mut cycles: BTreeMap<u32, CycleAccumulator> = BTreeMap::new();

    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row, header excluded
        let row = i + 1;
        let id = record.get(cols.battery_id).unwrap_or("").trim();
        match &battery_id {
            None => battery_id = Some(id.to_owned()),
            Some(b) if b != id => return Err(DatasetError::MixedBatteries(b.clone(), id.into())),
            _ => {}
        }
        let cycle_index: u32 = field(&record, cols.cycle_index, &schema.cycle_index, row)?;
        if cycle_index == 0 {
            return Err(DatasetError::InvalidCycleIndex { row });
        }
        let phase_raw = record.get(cols.phase).unwrap_or("");
        let phase = Phase::parse(phase_raw).ok_or_else(|| DatasetError::UnknownPhase {
            row,
            value: phase_raw.to_owned(),
        })?;
        let acc = cycles.entry(cycle_index).or_default();

        if let Some(ci) = cols.capacity {
            let raw = record.get(ci).unwrap_or("").trim();
            if !raw.is_empty() {
                let q: f64 = field(&record, ci, &schema.discharge_capacity_ah, row)?;
                match acc.capacity {
                    None => acc.capacity = Some(q),
                    Some(prev) if prev != q => {
                        return Err(DatasetError::InconsistentCapacity(cycle_index))
                    }
                    _ => {}
                }
            }
        }

        if phase == Phase::Charge {
            let time_s: f64 = field(&record, cols.time_s, &schema.time_s, row)?;
            let voltage_v: f64 = field(&record, cols.voltage_v, &schema.voltage_v, row)?;
            let mut current_a: f64 = field(&record, cols.current_a, &schema.current_a, row)?;
            if schema.negate_current {
                current_a = -current_a;
            }
            acc.samples.push(SamplePoint {
                time_s,
                voltage_v,
                current_a,
            });
        }
    }

    let battery_id = battery_id.ok_or(DatasetError::EmptyDataset)?;
    let cycles = cycles
        .into_iter()
        .map(|(cycle_index, acc)| {
            let capacity = match sidecar {
                Some(map) => map.get(&cycle_index).copied(),
                None => acc.capacity,
            }
            .ok_or(DatasetError::MissingCapacity(cycle_index))?;
            Ok(CycleRecord {
                cycle_index,
                samples: acc.samples,
                discharge_capacity_ah: capacity,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = BatteryDataset {
        battery_id,
        rated_capacity_ah: schema.rated_capacity_ah,
        cc_current_a: schema.cc_current_a,
        charge_cutoff_v: schema.charge_cutoff_v,
        cycles,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset in the default CSV layout (charge rows only, capacity
/// repeated on every row). Cycles without samples get a single discharge row
/// so their capacity survives a reload.
pub fn write_dataset<W: Write>(dataset: &BatteryDataset, writer: W) -> Result<()> {
    let s = CsvSchema::default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        &s.battery_id,
        &s.cycle_index,
        &s.phase,
        &s.time_s,
        &s.voltage_v,
        &s.current_a,
        &s.discharge_capacity_ah,
    ])?;
    for cycle in &dataset.cycles {
        let idx = cycle.cycle_index.to_string();
        let q = cycle.discharge_capacity_ah.to_string();
        if cycle.samples.is_empty() {
            w.write_record([dataset.battery_id.as_str(), &idx, "discharge", "0", "3", "-2", &q])?;
        }
        for p in &cycle.samples {
            w.write_record([
                dataset.battery_id.as_str(),
                &idx,
                "charge",
                &p.time_s.to_string(),
                &p.voltage_v.to_string(),
                &p.current_a.to_string(),
                &q,
            ])?;
        }
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: PathBuf::from("<writer>"),
        source,
    })?;
    Ok(())
}

/// Samples of one cycle's constant-current charge phase.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargeSegment {
    pub cycle_index: u32,
    pub samples: Vec<SamplePoint>,
    pub cc_current_a: f64,
}

/// Picks the longest contiguous run of samples whose current lies within
/// `tolerance_a` of the setpoint, then trims it at the first sample that
/// reaches `cutoff_v`. Ties between equally long runs go to the earliest.
pub fn extract_cc_segment(
    cycle: &CycleRecord,
    cc_current_a: f64,
    tolerance_a: f64,
    cutoff_v: f64,
) -> Result<ChargeSegment> {
    let in_band = |s: &SamplePoint| (s.current_a - cc_current_a).abs() <= tolerance_a;

    let mut best = 0..0;
    let mut start = None;
    for (i, s) in cycle.samples.iter().enumerate() {
        match (in_band(s), start) {
            (true, None) => start = Some(i),
            (false, Some(st)) => {
                if i - st > best.len() {
                    best = st..i;
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(st) = start {
        if cycle.samples.len() - st > best.len() {
            best = st..cycle.samples.len();
        }
    }

    let run = &cycle.samples[best];
    let end = match run.iter().position(|s| s.voltage_v >= cutoff_v) {
        Some(k) if run[k].voltage_v <= cutoff_v + CUTOFF_SLACK_V => k + 1,
        Some(k) => k,
        None => run.len(),
    };
    let samples = run[..end].to_vec();
    if samples.len() < MIN_SEGMENT_SAMPLES {
        return Err(DatasetError::SegmentTooShort(cycle.cycle_index));
    }
    Ok(ChargeSegment {
        cycle_index: cycle.cycle_index,
        samples,
        cc_current_a,
    })
}

/// Ratio of the cycle's discharge capacity to the reference. Not clamped:
/// capacity regeneration can push it slightly above one.
pub fn compute_soh(cycle: &CycleRecord, q_ref_ah: f64) -> Result<f64> {
    if !(q_ref_ah > 0.0) {
        return Err(DatasetError::NonPositiveReference(q_ref_ah));
    }
    Ok(cycle.discharge_capacity_ah / q_ref_ah)
}
