//! Grid runner and the on-disk artifact formats.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::summary::{summarize, Summary};
use super::HarnessError;
use crate::federation::{Federation, RoundRecord};
use crate::lora::AdapterMode;
use crate::numerics::RngStream;
use crate::privacy::Binding;

/// Bumped whenever the CSV column set changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 10] = [
    "schema_version",
    "mode",
    "epsilon_target",
    "epoch",
    "train_loss",
    "test_accuracy",
    "realized_epsilon_max",
    "power_bound_fraction",
    "mean_snr",
    "mean_alpha",
];

pub const MANIFEST_FILE: &str = "MANIFEST.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// One CSV line: the state after `epoch` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub schema_version: u32,
    pub mode: AdapterMode,
    pub epsilon_target: f64,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Largest per-round ε over all devices and all epochs so far.
    pub realized_epsilon_max: f64,
    /// Share of this epoch's devices whose α was set by the power cap.
    pub power_bound_fraction: f64,
    pub mean_snr: f64,
    pub mean_alpha: f64,
}

pub fn epoch_rows(
    mode: AdapterMode,
    epsilon_target: f64,
    records: &[RoundRecord],
) -> Vec<EpochRow> {
    let mut running = 0.0f64;
    records
        .iter()
        .map(|r| {
            let k = r.devices.len().max(1) as f64;
            for d in &r.devices {
                running = running.max(d.epsilon);
            }
            EpochRow {
                schema_version: SCHEMA_VERSION,
                mode,
                epsilon_target,
                epoch: r.round + 1,
                train_loss: r.train_loss,
                test_accuracy: r.test_accuracy,
                realized_epsilon_max: running,
                power_bound_fraction: r
                    .devices
                    .iter()
                    .filter(|d| d.binding == Binding::PowerBound)
                    .count() as f64
                    / k,
                mean_snr: r.devices.iter().map(|d| d.snr).sum::<f64>() / k,
                mean_alpha: r.devices.iter().map(|d| d.alpha).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Per-round randomness of one cell. Embedding the mode and ε keeps cells
/// independent of each other and of the order they run in.
pub fn cell_stream(seed: u64, mode: AdapterMode, epsilon: f64) -> RngStream {
    RngStream::new(seed)
        .child("grid")
        .child(mode.as_str())
        .child(format!("epsilon={epsilon:?}"))
}

pub fn cell_file_name(mode: AdapterMode, epsilon: f64) -> String {
    format!("{mode}_eps{epsilon}.csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellStatus {
    Completed,
    Failed,
}

/// Privacy accounting for one device of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpend {
    pub device: usize,
    #[serde(with = "super::float")]
    pub realized_epsilon: f64,
    pub privacy_bound_rounds: usize,
    pub power_bound_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub mode: AdapterMode,
    pub epsilon_target: f64,
    pub file: String,
    pub status: CellStatus,
    /// Rounds that finished and are in the CSV.
    pub epochs: usize,
    pub error: Option<String>,
    pub devices: Vec<DeviceSpend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub cells: Vec<CellEntry>,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub manifest: Manifest,
    pub summary: Summary,
}

impl GridReport {
    pub fn failed(&self) -> usize {
        self.manifest
            .cells
            .iter()
            .filter(|c| c.status == CellStatus::Failed)
            .count()
    }
}

fn device_spends(records: &[RoundRecord], devices: usize) -> Vec<DeviceSpend> {
    let mut out: Vec<DeviceSpend> = (0..devices)
        .map(|device| DeviceSpend {
            device,
            realized_epsilon: 0.0,
            privacy_bound_rounds: 0,
            power_bound_rounds: 0,
        })
        .collect();
    for d in records.iter().flat_map(|r| &r.devices) {
        let s = &mut out[d.device];
        s.realized_epsilon = s.realized_epsilon.max(d.epsilon);
        match d.binding {
            Binding::PrivacyBound => s.privacy_bound_rounds += 1,
            Binding::PowerBound => s.power_bound_rounds += 1,
        }
    }
    out
}

fn write_csv(path: &Path, rows: &[EpochRow]) -> Result<(), HarnessError> {
    let to_err = |e: csv::Error| HarnessError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(to_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(to_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn run_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    mode: AdapterMode,
    epsilon: f64,
    out: &Path,
) -> (CellEntry, Vec<EpochRow>) {
    let fed_cfg = cfg.cell(mode, epsilon);
    let mut records = Vec::with_capacity(fed_cfg.rounds);
    let error = match Federation::new(fed_cfg.clone(), seed, cell_stream(seed, mode, epsilon)) {
        Err(e) => Some(e.to_string()),
        Ok(mut fed) => (0..fed_cfg.rounds).find_map(|t| match fed.run_round(t, None) {
            Ok(r) => {
                records.push(r);
                None
            }
            Err(e) => Some(e.to_string()),
        }),
    };
    let rows = epoch_rows(mode, epsilon, &records);
    let file = cell_file_name(mode, epsilon);
    let error = match (error, write_csv(&out.join(&file), &rows)) {
        (Some(e), _) => Some(e),
        (None, Err(e)) => Some(e.to_string()),
        (None, Ok(())) => None,
    };
    let entry = CellEntry {
        mode,
        epsilon_target: epsilon,
        file,
        status: if error.is_some() {
            CellStatus::Failed
        } else {
            CellStatus::Completed
        },
        epochs: records.len(),
        error,
        devices: device_spends(&records, fed_cfg.devices),
    };
    (entry, rows)
}

/// Runs every (mode, ε) cell, writing one CSV each plus the manifest and
/// summary. Cells run on `jobs` threads; failed cells keep whatever rounds
/// completed and are flagged in the manifest.
pub fn run_grid(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    jobs: usize,
) -> Result<GridReport, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let cells: Vec<(AdapterMode, f64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.epsilons.iter().map(move |&e| (m, e)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Artifact {
            path: PathBuf::from(out),
            message: format!("thread pool: {e}"),
        })?;
    let results: Vec<(CellEntry, Vec<EpochRow>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, e)| run_cell(cfg, seed, m, e, out))
            .collect()
    });
    let (entries, rows): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed,
        config: cfg.clone(),
        cells: entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let summary = summarize(&manifest, &rows);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(GridReport { manifest, summary })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, HarnessError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Artifact {
        path,
        message: e.to_string(),
    })
}

/// Reads a cell CSV, insisting on the exact versioned column set.
pub(crate) fn read_csv(path: &Path) -> Result<Vec<EpochRow>, HarnessError> {
    let to_err = |message: String| HarnessError::Artifact {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| to_err(e.to_string()))?;
    let header = r.headers().map_err(|e| to_err(e.to_string()))?;
    if !header.iter().eq(CSV_COLUMNS) {
        return Err(to_err(format!("unexpected columns {header:?}")));
    }
    let rows = r
        .deserialize::<EpochRow>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| to_err(e.to_string()))?;
    if let Some(row) = rows.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(to_err(format!(
            "schema_version {} is not {SCHEMA_VERSION}",
            row.schema_version
        )));
    }
    Ok(rows)
}
