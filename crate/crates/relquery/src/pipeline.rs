//! Dataset, triplet and model construction shared by the CLI, the service
//! and the acceptance suite.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use relquery_core::experiment::{k_sweep_rows, k_sweep_trial, prepare, run_trial, work_units, ExperimentError, KSweepRow, TrialResult};
use relquery_core::rng::stream;
use relquery_core::synthworld::{make_triplets, Dataset, SynthError, Triplet};
use relquery_core::vae::{eval_reconstruction, eval_triplet_satisfaction, mean_encoder_sigma, train_with_progress, EpochMetrics, VaeError};
use relquery_core::{ExperimentConfig, ModelKey, Vae};
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub fn generate_dataset(cfg: &Config) -> Result<Dataset, SynthError> {
    Dataset::generate(&cfg.dataset, &mut stream(cfg.data_seed(), &[]))
}

/// Triplet supervision for both training conditions plus the clean test set.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSets {
    pub clean: Vec<Triplet>,
    /// Labeled by metadata with additive Gaussian noise on every item.
    pub noisy: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

impl TripletSets {
    pub fn for_model(&self, key: ModelKey) -> &[Triplet] {
        if key.noisy {
            &self.noisy
        } else {
            &self.clean
        }
    }
}

pub fn build_triplets(dataset: &Dataset, cfg: &Config) -> Result<TripletSets, SynthError> {
    let clean_labels = dataset.clean_labels();
    let noisy_labels = dataset.noisy_labels(cfg.triplets.noise_sigma, &mut stream(cfg.noise_seed(), &[]));
    // Clean and noisy sets share the sampling stream so they differ only in labeling.
    let clean = make_triplets(&clean_labels, &dataset.train, cfg.triplets.train, &mut stream(cfg.triplet_seed(), &[]))?;
    let noisy = make_triplets(&noisy_labels, &dataset.train, cfg.triplets.train, &mut stream(cfg.triplet_seed(), &[]))?;
    let test = make_triplets(&clean_labels, &dataset.test, cfg.triplets.test, &mut stream(cfg.test_triplet_seed(), &[]))?;
    Ok(TripletSets { clean, noisy, test })
}

pub struct TrainedModel {
    pub key: ModelKey,
    pub vae: Vae<f32>,
    pub history: Vec<EpochMetrics>,
}

pub fn train_model(
    dataset: &Dataset,
    triplets: &TripletSets,
    key: ModelKey,
    cfg: &Config,
    progress: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel, VaeError> {
    let (vae, history) = train_with_progress(dataset, triplets.for_model(key), cfg.split, &cfg.train_config(key), progress)?;
    Ok(TrainedModel { key, vae, history })
}

/// Trains the listed models on up to `threads` workers. Output order follows `keys`.
pub fn train_models(
    dataset: &Dataset,
    triplets: &TripletSets,
    keys: &[ModelKey],
    cfg: &Config,
    threads: usize,
) -> Result<Vec<TrainedModel>, VaeError> {
    let results = parallel_map(keys.len(), threads, |i| {
        let key = keys[i];
        train_model(dataset, triplets, key, cfg, |m| {
            if m.epoch % 10 == 0 {
                log::info!("{} epoch {} recon {:.5} kl {:.4} triplet {:.4}", key.id(), m.epoch, m.recon, m.kl, m.triplet);
            }
        })
    });
    results.into_iter().collect()
}

/// Held-out quality of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub key: ModelKey,
    /// Percentage of clean test triplets ordered correctly by encoder means.
    pub satisfaction: f64,
    /// Per-pixel MSE of decoding the encoder mean on the test split.
    pub reconstruction: f64,
    pub mean_sigma: f64,
}

pub fn evaluate(key: ModelKey, vae: &Vae<f32>, dataset: &Dataset, test_triplets: &[Triplet]) -> EvalMetrics {
    let test_images = || dataset.test.iter().map(|&i| &dataset.items[i].image);
    EvalMetrics {
        key,
        satisfaction: eval_triplet_satisfaction(vae, dataset, test_triplets),
        reconstruction: eval_reconstruction(vae, test_images()),
        mean_sigma: mean_encoder_sigma(vae, test_images()),
    }
}

/// Runs the experiment grid on `threads` workers. Each (cell, trial) owns its
/// random streams, so the result equals the sequential runner's exactly.
pub fn run_experiment_parallel(
    models: &[(ModelKey, &Vae<f32>)],
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<Vec<TrialResult>, ExperimentError> {
    let prepared = prepare(models, dataset, cfg)?;
    let units = work_units(cfg);
    let done = AtomicUsize::new(0);
    let results = parallel_map(units.len(), threads, |i| {
        let (cell, trial) = units[i];
        let p = &prepared.iter().find(|(k, _)| *k == cell.model).expect("prepared every key").1;
        let out = run_trial(p.vae, &p.pool, dataset, cell, cfg, trial);
        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
        if n % 20 == 0 {
            log::info!("experiment {n}/{} sessions", units.len());
        }
        out
    });
    results.into_iter().collect()
}

/// Logistic `k` sensitivity for every model, trials spread over threads.
pub fn k_sweep_parallel(
    models: &[(ModelKey, &Vae<f32>)],
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    ks: &[f64],
    threads: usize,
) -> Result<Vec<KSweepRow>, ExperimentError> {
    if ks.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
        return Err(ExperimentError::InvalidConfig("logistic k must be positive".into()));
    }
    let prepared = prepare(models, dataset, cfg)?;
    let units: Vec<(usize, usize, usize)> = (0..prepared.len())
        .flat_map(|m| (0..ks.len()).flat_map(move |i| (0..cfg.trials).map(move |t| (m, i, t))))
        .collect();
    let results = parallel_map(units.len(), threads, |u| {
        let (m, i, trial) = units[u];
        let (key, p) = &prepared[m];
        k_sweep_trial(p.vae, &p.pool, dataset, *key, cfg, ks[i], trial).map(|r| (m, i, r))
    });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(prepared
        .iter()
        .enumerate()
        .flat_map(|(m, (key, _))| {
            let mine: Vec<(usize, TrialResult)> = results.iter().filter(|r| r.0 == m).map(|(_, i, r)| (*i, r.clone())).collect();
            k_sweep_rows(*key, ks, &mine)
        })
        .collect())
}

/// Applies `f` to `0..n` on a pool of scoped threads, preserving index order.
pub fn parallel_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every index computed")).collect()
}
