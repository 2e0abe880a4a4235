#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use relquery::config::{Config, InteractiveConfig, TripletConfig};
use relquery::pipeline::{self, TripletSets};
use relquery::service::ModelEntry;
use relquery_core::experiment::pool_and_targets;
use relquery_core::synthworld::{Dataset, DatasetConfig};
use relquery_core::vae::TrainConfig;
use relquery_core::{ExperimentConfig, McmcConfig, ModelKey, Pool, Vae};

/// Small enough to train all six models in a few seconds.
pub fn tiny_config(seed: u64) -> Config {
    let mcmc = McmcConfig { iterations: 400, burn_in: 100, ..McmcConfig::default() };
    Config {
        seed,
        dataset: DatasetConfig { size: 500, test_size: 200, ..Default::default() },
        triplets: TripletConfig { train: 1_000, test: 300, noise_sigma: 0.5 },
        train: TrainConfig { epochs: 2, ..TrainConfig::default() },
        experiment: ExperimentConfig { trials: 2, budget: 4, pool_size: 100, mcmc, ..ExperimentConfig::default() },
        interactive: InteractiveConfig { budget: 4, mcmc, answer_timeout_secs: 5 },
        threads: 2,
        ..Config::default()
    }
}

pub struct World {
    pub cfg: Config,
    pub dataset: Dataset,
    pub triplets: TripletSets,
    pub models: Vec<(ModelKey, Vae<f32>)>,
}

impl World {
    pub fn build(cfg: Config) -> World {
        let dataset = pipeline::generate_dataset(&cfg).unwrap();
        let triplets = pipeline::build_triplets(&dataset, &cfg).unwrap();
        let models = pipeline::train_models(&dataset, &triplets, &ModelKey::all(), &cfg, cfg.threads)
            .unwrap()
            .into_iter()
            .map(|t| (t.key, t.vae))
            .collect();
        World { cfg, dataset, triplets, models }
    }

    pub fn model(&self, key: ModelKey) -> &Vae<f32> {
        &self.models.iter().find(|(k, _)| *k == key).unwrap().1
    }

    pub fn model_refs(&self) -> Vec<(ModelKey, &Vae<f32>)> {
        self.models.iter().map(|(k, v)| (*k, v)).collect()
    }

    pub fn entries(&self) -> HashMap<String, Arc<ModelEntry>> {
        let (pool_idx, _) = pool_and_targets(&self.dataset, self.cfg.experiment.pool_size).unwrap();
        self.models
            .iter()
            .map(|(k, v)| {
                let pool = Pool::build(v, &self.dataset, pool_idx).unwrap();
                (k.id(), Arc::new(ModelEntry { vae: v.clone(), pool, standardizer: self.dataset.standardizer.clone() }))
            })
            .collect()
    }
}
