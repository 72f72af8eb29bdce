//! Experiment configuration: a single JSON document, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::channel::FadingModel;
use crate::data::DataSpec;
use crate::federation::{FederationConfig, PowerPolicy, Receiver};
use crate::lora::AdapterMode;
use crate::model::{HeadOptimizer, ModelConfig};
use crate::privacy::Accountant;

/// Data-generation knobs that are not already fixed by the model shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataParams {
    /// Total examples before the 80/20 split.
    pub n: usize,
    /// Share of the training set held by each device.
    pub fraction: f64,
    pub margin: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            n: 2000,
            fraction: 0.05,
            margin: 3.0,
        }
    }
}

/// A grid of training runs over adapter modes and privacy targets.
///
/// Defaults: K = 15, ε ∈ {3, 5, 10, 100}, δ = 1e-5, C = 0.01, r = 4,
/// η = 1e-3, 30 rounds; the remaining knobs are desk-scale choices
/// documented in the README.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Used when no `--seed` is given on the command line.
    pub seed: Option<u64>,
    pub devices: usize,
    pub rounds: usize,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub clip_c: f64,
    pub c1: f64,
    pub accountant: Accountant,
    pub fading: FadingModel,
    pub n0: f64,
    pub p_max: f64,
    pub power_policy: PowerPolicy,
    pub receiver: Receiver,
    pub eta: f64,
    pub eta_local: f64,
    pub head_optimizer: HeadOptimizer,
    /// `0` uses the whole shard every round.
    pub batch_size: usize,
    pub model: ModelConfig,
    pub data: DataParams,
    pub modes: Vec<AdapterMode>,
    /// Run devices of a round on the thread pool.
    pub parallel: bool,
    /// Used when no `--out` is given.
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            devices: 15,
            rounds: 30,
            epsilons: vec![3.0, 5.0, 10.0, 100.0],
            delta: 1e-5,
            clip_c: 0.01,
            c1: 1.0,
            accountant: Accountant::MomentsAccountant,
            fading: FadingModel::rayleigh(),
            n0: 1.0,
            p_max: 3.2e5,
            power_policy: PowerPolicy::PrivacyAware,
            receiver: Receiver::FullPowerReference,
            eta: 1e-3,
            eta_local: 0.1,
            head_optimizer: HeadOptimizer::Sgd,
            batch_size: 32,
            model: ModelConfig::default(),
            data: DataParams::default(),
            modes: AdapterMode::ALL.to_vec(),
            parallel: false,
            out: None,
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses JSON text; errors carry the key path of the offending value.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The training configuration of one grid cell.
    pub fn cell(&self, mode: AdapterMode, epsilon: f64) -> FederationConfig {
        FederationConfig {
            model: self.model,
            mode,
            devices: self.devices,
            rounds: self.rounds,
            eta: self.eta,
            eta_local: self.eta_local,
            head_optimizer: self.head_optimizer,
            batch_size: self.batch_size,
            epsilon_target: epsilon,
            delta: self.delta,
            clip_c: self.clip_c,
            c1: self.c1,
            accountant: self.accountant,
            fading: self.fading,
            n0: self.n0,
            p_max: self.p_max,
            power_policy: self.power_policy,
            receiver: self.receiver,
            data: DataSpec {
                n: self.data.n,
                d_x: self.model.d_x,
                classes: self.model.classes,
                margin: self.data.margin,
            },
            fraction: self.data.fraction,
            parallel: self.parallel,
        }
    }

    /// Checks every constraint before anything runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(
                "delta",
                format!("delta must lie in (0,1), got {}", self.delta),
            ));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(invalid(
                "clip_c",
                format!("clip_c must be > 0, got {}", self.clip_c),
            ));
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(invalid("c1", format!("c1 must be > 0, got {}", self.c1)));
        }
        if self.devices == 0 {
            return Err(invalid("devices", "devices must be >= 1"));
        }
        if !(self.n0 >= 0.0 && self.n0.is_finite()) {
            return Err(invalid("n0", format!("n0 must be >= 0, got {}", self.n0)));
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(invalid(
                "p_max",
                format!("p_max must be > 0, got {}", self.p_max),
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid(
                "eta",
                format!("eta must be >= 0, got {}", self.eta),
            ));
        }
        if !(self.eta_local >= 0.0 && self.eta_local.is_finite()) {
            return Err(invalid(
                "eta_local",
                format!("eta_local must be >= 0, got {}", self.eta_local),
            ));
        }
        if self.epsilons.is_empty() {
            return Err(invalid(
                "epsilons",
                "at least one privacy target is required",
            ));
        }
        for (i, &eps) in self.epsilons.iter().enumerate() {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(invalid(
                    &format!("epsilons[{i}]"),
                    format!("epsilon must be finite and > 0, got {eps}"),
                ));
            }
            if self.epsilons[..i].contains(&eps) {
                return Err(invalid(
                    &format!("epsilons[{i}]"),
                    format!("duplicate epsilon {eps}"),
                ));
            }
        }
        if self.modes.is_empty() {
            return Err(invalid("modes", "at least one adapter mode is required"));
        }
        for (i, mode) in self.modes.iter().enumerate() {
            if self.modes[..i].contains(mode) {
                return Err(invalid(
                    &format!("modes[{i}]"),
                    format!("duplicate mode {mode}"),
                ));
            }
        }
        self.fading
            .validate()
            .map_err(|e| invalid("fading", e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            return Err(invalid(
                "data.fraction",
                format!("fraction must lie in (0,1], got {}", self.data.fraction),
            ));
        }
        if !(self.data.margin >= 0.0 && self.data.margin.is_finite()) {
            return Err(invalid(
                "data.margin",
                format!("margin must be >= 0, got {}", self.data.margin),
            ));
        }
        if self.data.n < 2 * self.model.classes {
            return Err(invalid(
                "data.n",
                format!(
                    "need at least two examples per class, got n = {}",
                    self.data.n
                ),
            ));
        }
        if self.model.classes > self.model.d_x {
            return Err(invalid("model.classes", "classes must not exceed d_x"));
        }
        // Anything the pieces above miss is caught by the per-cell check.
        for &mode in &self.modes {
            for &eps in &self.epsilons {
                self.cell(mode, eps)
                    .validate()
                    .map_err(|e| invalid("", e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
        path: String::new(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    ExperimentConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_err(text: &str) -> (String, String) {
        match ExperimentConfig::from_json(text) {
            Err(HarnessError::Config { path, message }) => (path, message),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.epsilons, vec![3.0, 5.0, 10.0, 100.0]);
        assert_eq!(cfg.devices, 15);
    }

    #[test]
    fn delta_out_of_range_is_rejected() {
        let (path, msg) = config_err(r#"{"delta": 1.5}"#);
        assert_eq!(path, "delta");
        assert!(msg.contains("delta must lie in (0,1)"), "{msg}");
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let (path, msg) = config_err(r#"{"model": {"rnak": 2}}"#);
        assert_eq!(path, "model.rnak");
        assert!(msg.contains("unknown field"), "{msg}");
        let (path, _) = config_err(r#"{"detla": 0.1}"#);
        assert_eq!(path, "detla");
    }

    #[test]
    fn type_errors_name_their_path() {
        let (path, _) = config_err(r#"{"epsilons": [3, "five"]}"#);
        assert_eq!(path, "epsilons[1]");
        let (path, _) = config_err(r#"{"modes": ["UpdateBoth", "Sideways"]}"#);
        assert_eq!(path, "modes[1]");
    }

    #[test]
    fn malformed_json_is_a_config_error() {
        config_err("{\"rounds\": ");
    }

    #[test]
    fn semantic_constraints_name_their_path() {
        assert_eq!(config_err(r#"{"epsilons": [3, -1]}"#).0, "epsilons[1]");
        assert_eq!(
            config_err(r#"{"data": {"fraction": 0}}"#).0,
            "data.fraction"
        );
        assert_eq!(config_err(r#"{"model": {"rank": 20}}"#).0, "model");
        assert_eq!(config_err(r#"{"modes": []}"#).0, "modes");
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"{"seed": 7, "rounds": 2, "epsilons": [0.5, 100],
            "fading": {"kind": "Constant", "h0": 0.8, "h_floor": 0.01},
            "modes": ["FixedGaussianA"], "out": "somewhere"}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        let default = ExperimentConfig::default();
        assert_eq!(
            ExperimentConfig::from_json(&default.to_json()).unwrap(),
            default
        );
    }
}
