//! Per-cell digests and the cross-mode accuracy ordering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{read_csv, read_manifest, CellStatus, EpochRow, Manifest};
use super::HarnessError;
use crate::lora::AdapterMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mode: AdapterMode,
    pub epsilon_target: f64,
    pub status: CellStatus,
    pub epochs: usize,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    /// First epoch (1-based) at which `best_accuracy` was reached.
    pub epochs_to_best: Option<usize>,
    /// Worst case over devices of each device's realized ε.
    #[serde(with = "super::float")]
    pub realized_epsilon_max: f64,
    pub privacy_bound_rounds: usize,
    pub power_bound_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub mode: AdapterMode,
    pub final_accuracy: f64,
}

/// Modes at one ε, best final accuracy first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub epsilon_target: f64,
    pub ranking: Vec<ModeAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    pub ordering: Vec<Ordering>,
}

/// Builds the summary from the manifest and each cell's rows (same order).
pub fn summarize(manifest: &Manifest, rows: &[Vec<EpochRow>]) -> Summary {
    let cells: Vec<CellSummary> = manifest
        .cells
        .iter()
        .zip(rows)
        .map(|(cell, rows)| {
            let final_accuracy = rows.last().map(|r| r.test_accuracy);
            let best = rows.iter().fold(None::<&EpochRow>, |b, r| match b {
                Some(b) if b.test_accuracy >= r.test_accuracy => Some(b),
                _ => Some(r),
            });
            CellSummary {
                mode: cell.mode,
                epsilon_target: cell.epsilon_target,
                status: cell.status,
                epochs: rows.len(),
                final_accuracy,
                best_accuracy: best.map(|r| r.test_accuracy),
                epochs_to_best: best.map(|r| r.epoch),
                realized_epsilon_max: cell
                    .devices
                    .iter()
                    .map(|d| d.realized_epsilon)
                    .fold(0.0, f64::max),
                privacy_bound_rounds: cell.devices.iter().map(|d| d.privacy_bound_rounds).sum(),
                power_bound_rounds: cell.devices.iter().map(|d| d.power_bound_rounds).sum(),
            }
        })
        .collect();

    let mut epsilons: Vec<f64> = Vec::new();
    for c in &cells {
        if !epsilons.contains(&c.epsilon_target) {
            epsilons.push(c.epsilon_target);
        }
    }
    let ordering = epsilons
        .into_iter()
        .map(|eps| {
            let mut ranking: Vec<ModeAccuracy> = cells
                .iter()
                .filter(|c| c.epsilon_target == eps && c.status == CellStatus::Completed)
                .filter_map(|c| {
                    c.final_accuracy.map(|a| ModeAccuracy {
                        mode: c.mode,
                        final_accuracy: a,
                    })
                })
                .collect();
            // Stable: ties keep config order.
            ranking.sort_by(|a, b| b.final_accuracy.total_cmp(&a.final_accuracy));
            Ordering {
                epsilon_target: eps,
                ranking,
            }
        })
        .collect();

    Summary {
        schema_version: manifest.schema_version,
        seed: manifest.seed,
        cells,
        ordering,
    }
}

/// Recomputes the summary of a run directory from its files.
pub fn summarize_dir(dir: &Path) -> Result<Summary, HarnessError> {
    let manifest = read_manifest(dir)?;
    let rows = manifest
        .cells
        .iter()
        .map(|c| {
            let path = dir.join(&c.file);
            if path.exists() || c.status == CellStatus::Completed {
                read_csv(&path)
            } else {
                Ok(Vec::new())
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(&manifest, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{CellEntry, DeviceSpend, ExperimentConfig, SCHEMA_VERSION};

    fn row(mode: AdapterMode, epoch: usize, acc: f64) -> EpochRow {
        EpochRow {
            schema_version: SCHEMA_VERSION,
            mode,
            epsilon_target: 3.0,
            epoch,
            train_loss: 1.0,
            test_accuracy: acc,
            realized_epsilon_max: 2.0,
            power_bound_fraction: 0.5,
            mean_snr: 1.0,
            mean_alpha: 1.0,
        }
    }

    fn entry(mode: AdapterMode) -> CellEntry {
        CellEntry {
            mode,
            epsilon_target: 3.0,
            file: String::new(),
            status: CellStatus::Completed,
            epochs: 3,
            error: None,
            devices: vec![
                DeviceSpend {
                    device: 0,
                    realized_epsilon: 2.5,
                    privacy_bound_rounds: 1,
                    power_bound_rounds: 2,
                },
                DeviceSpend {
                    device: 1,
                    realized_epsilon: 2.9,
                    privacy_bound_rounds: 3,
                    power_bound_rounds: 0,
                },
            ],
        }
    }

    #[test]
    fn digests_and_ordering() {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            config: ExperimentConfig::default(),
            cells: vec![
                entry(AdapterMode::UpdateBoth),
                entry(AdapterMode::FixedOrthonormalA),
            ],
        };
        let both = vec![
            row(AdapterMode::UpdateBoth, 1, 0.5),
            row(AdapterMode::UpdateBoth, 2, 0.7),
            row(AdapterMode::UpdateBoth, 3, 0.6),
        ];
        let ortho = vec![
            row(AdapterMode::FixedOrthonormalA, 1, 0.8),
            row(AdapterMode::FixedOrthonormalA, 2, 0.8),
            row(AdapterMode::FixedOrthonormalA, 3, 0.8),
        ];
        let s = summarize(&manifest, &[both, ortho]);
        let c = &s.cells[0];
        assert_eq!(c.final_accuracy, Some(0.6));
        assert_eq!(c.best_accuracy, Some(0.7));
        assert_eq!(c.epochs_to_best, Some(2));
        assert_eq!(c.realized_epsilon_max, 2.9);
        assert_eq!((c.privacy_bound_rounds, c.power_bound_rounds), (4, 2));
        assert_eq!(s.cells[1].epochs_to_best, Some(1));
        assert_eq!(s.ordering.len(), 1);
        let modes: Vec<_> = s.ordering[0].ranking.iter().map(|m| m.mode).collect();
        assert_eq!(
            modes,
            vec![AdapterMode::FixedOrthonormalA, AdapterMode::UpdateBoth]
        );
    }

    #[test]
    fn single_cell_ordering_is_a_singleton() {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            config: ExperimentConfig::default(),
            cells: vec![entry(AdapterMode::FixedGaussianA)],
        };
        let s = summarize(&manifest, &[vec![row(AdapterMode::FixedGaussianA, 1, 0.4)]]);
        assert_eq!(s.ordering[0].ranking.len(), 1);
    }

    #[test]
    fn infinite_epsilon_survives_json() {
        let mut manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            config: ExperimentConfig::default(),
            cells: vec![entry(AdapterMode::FixedGaussianA)],
        };
        manifest.cells[0].devices[0].realized_epsilon = f64::INFINITY;
        let text = serde_json::to_string(&manifest).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, manifest);
    }
}
