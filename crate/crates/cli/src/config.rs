//! Run configuration and the provenance stamp written into every output.

use std::path::Path;

use bcrisk::interpret::{HeatmapConfig, DEFAULT_TOP_K};
use bcrisk::mil::TrainConfig;
use bcrisk::stats::{BootstrapConfig, DEFAULT_RESAMPLES, SIGNIFICANCE_LEVEL};
use bcrisk::survival::DEFAULT_ALPHA;
use bcrisk::tiling::{PlanConfig, SpacingPolicy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_TUNING_FRACTION: f64 = 0.2;

/// Everything a command may read from `--config`. Top-level `seed`, `alpha`
/// and `tuning_fraction` take precedence over the copies inside `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub bootstrap: usize,
    pub workers: usize,
    pub alpha: f64,
    pub folds: usize,
    pub tuning_fraction: f64,
    pub tau: f64,
    pub top_k: usize,
    pub spacing: SpacingPolicy,
    pub plan: PlanConfig,
    pub train: TrainConfig,
    pub heatmap: HeatmapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bootstrap: DEFAULT_RESAMPLES,
            workers: 1,
            alpha: DEFAULT_ALPHA,
            folds: DEFAULT_FOLDS,
            tuning_fraction: DEFAULT_TUNING_FRACTION,
            tau: SIGNIFICANCE_LEVEL,
            top_k: DEFAULT_TOP_K,
            spacing: SpacingPolicy::default(),
            plan: PlanConfig::default(),
            train: TrainConfig::default(),
            heatmap: HeatmapConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CliError::Usage(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CliError::Usage(format!(
                "tau must be in (0, 1), got {}",
                self.tau
            )));
        }
        if self.bootstrap == 0 {
            return Err(CliError::Usage("bootstrap must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.bootstrap,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            alpha: self.alpha,
            tuning_fraction: self.tuning_fraction,
            ..self.train
        }
    }

    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
}

impl Provenance {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: "bcrisk".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            config_sha256: cfg.sha256(),
        }
    }

    /// Comment line that heads CSV outputs.
    pub fn csv_line(&self) -> String {
        format!(
            "# {} {} command={} seed={} config_sha256={}\n",
            self.tool, self.version, self.command, self.seed, self.config_sha256
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[train]\nmax_epochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.bootstrap, 4000);
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.train.halving_period, 20);
        assert_eq!(cfg.train_config().seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 1").is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_eq!(a.sha256(), RunConfig::default().sha256());
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
    }
}
