//! Run configuration loaded from `--config <json>`.
//!
//! Every stage seed is derived from the single top-level `seed`, so two runs
//! with the same file and seed produce the same dataset, models and tables.

use std::path::Path;

use relquery_core::experiment::ExperimentConfig;
use relquery_core::response::{ResponseConfig, ResponseKind};
use relquery_core::rng::derive_seed;
use relquery_core::synthworld::DatasetConfig;
use relquery_core::vae::{LatentSplit, TrainConfig};
use relquery_core::{McmcConfig, ModelKey, Objective};
use serde::{Deserialize, Serialize};

use crate::dataio::{read_json, DataError};

const DATA_STREAM: u64 = 1;
const TRIPLET_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const TEST_TRIPLET_STREAM: u64 = 4;
const TRAIN_STREAM: u64 = 5;
const EXPERIMENT_STREAM: u64 = 6;
const SERVICE_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    /// Training triplets per model.
    pub train: usize,
    /// Held-out triplets for the satisfaction metric, always clean.
    pub test: usize,
    /// Standard deviation of the label noise for the noisy condition, in standardized units.
    pub noise_sigma: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { train: 50_000, test: 10_000, noise_sigma: 0.5 }
    }
}

/// Settings for interactive sessions (CLI `localize` and the service).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractiveConfig {
    pub budget: usize,
    pub mcmc: McmcConfig,
    /// Seconds to wait for a stdin answer before suspending.
    pub answer_timeout_secs: u64,
}

impl Default for InteractiveConfig {
    fn default() -> Self {
        InteractiveConfig { budget: 30, mcmc: McmcConfig::default(), answer_timeout_secs: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub triplets: TripletConfig,
    pub split: LatentSplit,
    /// Objective and seed are filled in per model.
    pub train: TrainConfig,
    /// The seed is derived from `seed`.
    pub experiment: ExperimentConfig,
    pub interactive: InteractiveConfig,
    /// Worker threads for training and the experiment grid; 0 uses every core.
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            dataset: DatasetConfig::default(),
            triplets: TripletConfig::default(),
            split: LatentSplit::default(),
            train: TrainConfig::default(),
            experiment: ExperimentConfig::default(),
            interactive: InteractiveConfig::default(),
            threads: 0,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        read_json(path)
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, &[DATA_STREAM])
    }

    pub fn triplet_seed(&self) -> u64 {
        derive_seed(self.seed, &[TRIPLET_STREAM])
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, &[NOISE_STREAM])
    }

    pub fn test_triplet_seed(&self) -> u64 {
        derive_seed(self.seed, &[TEST_TRIPLET_STREAM])
    }

    /// Training settings for one grid model.
    pub fn train_config(&self, key: ModelKey) -> TrainConfig {
        let index = Objective::ALL.iter().position(|&o| o == key.objective).expect("known objective") as u64;
        TrainConfig { objective: key.objective, seed: derive_seed(self.seed, &[TRAIN_STREAM, index, key.noisy as u64]), ..self.train }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig { seed: derive_seed(self.seed, &[EXPERIMENT_STREAM]), ..self.experiment }
    }

    /// Response model shared by the experiment and interactive sessions.
    pub fn response(&self, kind: ResponseKind) -> ResponseConfig {
        self.experiment.response(kind)
    }

    /// Seed of the `n`-th service session when the client does not pick one.
    pub fn service_session_seed(&self, n: u64) -> u64 {
        derive_seed(self.seed, &[SERVICE_STREAM, n])
    }

    pub fn worker_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            n => n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"seed": 4, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.triplets.train, 50_000);
        assert!(serde_json::from_str::<Config>(r#"{"sede": 4}"#).is_err());
    }

    #[test]
    fn model_seeds_differ_per_cell() {
        let cfg = Config::default();
        let seeds: Vec<u64> = ModelKey::all().into_iter().map(|k| cfg.train_config(k).seed).collect();
        for (i, a) in seeds.iter().enumerate() {
            assert!(seeds[i + 1..].iter().all(|b| b != a));
        }
        assert_eq!(cfg.train_config(ModelKey::all()[0]).objective, ModelKey::all()[0].objective);
    }
}
