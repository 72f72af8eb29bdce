//! Experiment plumbing behind the `splitfed` binary: config parsing, the
//! (mode × ε) grid runner, CSV/JSON artifacts and their summary.
//!
//! A run directory holds one CSV per cell, `MANIFEST.json` (config, seed,
//! per-cell status and per-device privacy spend) and `summary.json`. All of
//! it is a pure function of the config and the seed.

mod config;
mod grid;
mod summary;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{parse_config, DataParams, ExperimentConfig};
pub use grid::{
    cell_file_name, cell_stream, epoch_rows, read_manifest, run_grid, CellEntry, CellStatus,
    DeviceSpend, EpochRow, GridReport, Manifest, CSV_COLUMNS, MANIFEST_FILE, SCHEMA_VERSION,
    SUMMARY_FILE,
};
pub use summary::{summarize, summarize_dir, CellSummary, ModeAccuracy, Ordering, Summary};

/// Seed used when neither the command line nor the environment gives one.
pub const SEED_ENV: &str = "SIM_DEFAULT_SEED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error{}: {message}", at(.path))]
    Config { path: String, message: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {}: {message}", .path.display())]
    Artifact { path: PathBuf, message: String },

    #[error("{failed} of {total} grid cells failed")]
    CellsFailed { failed: usize, total: usize },
}

fn at(path: &str) -> String {
    if path.is_empty() || path == "." {
        String::new()
    } else {
        format!(" at `{path}`")
    }
}

impl HarnessError {
    /// Process exit status: 2 for bad configuration, 3 for anything at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config { .. } => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}

/// `--seed`, else the `SIM_DEFAULT_SEED` value, else the config's seed, else 0.
pub fn resolve_seed(
    cli: Option<u64>,
    env: Option<&str>,
    config: Option<u64>,
) -> Result<u64, HarnessError> {
    if let Some(seed) = cli {
        return Ok(seed);
    }
    if let Some(raw) = env {
        return raw.trim().parse().map_err(|e| HarnessError::Config {
            path: String::new(),
            message: format!("{SEED_ENV}={raw:?} is not an unsigned integer: {e}"),
        });
    }
    Ok(config.unwrap_or(0))
}

/// Serializes non-finite floats as strings so JSON artifacts round-trip
/// unbounded privacy losses.
pub(crate) mod float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}
