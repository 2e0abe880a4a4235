//! The localization ablation: objectives × response models × noise.
//!
//! Each cell runs the same trials. Trial `t` uses the same target item and the
//! same session seed in every cell, so cells differ only in the model and the
//! response model.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::McmcConfig;
use crate::math::quartiles;
use crate::nnet::Real;
use crate::response::{ResponseConfig, ResponseKind};
use crate::rng::{derive_seed, stream};
use crate::session::{run_session, Localizer, Pool, SessionConfig, SessionError, SyntheticOracle, Trajectory};
use crate::synthworld::{Dataset, SynthError};
use crate::vae::{Objective, Vae};

const TARGET_STREAM: u64 = 10;
const SESSION_STREAM: u64 = 11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("no trained model for cell {0}")]
    MissingModel(String),
    #[error("test split has {got} items; the pool and targets need more than {pool}")]
    SplitTooSmall { pool: usize, got: usize },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Training condition of a model: objective and whether its triplets were noisy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelKey {
    pub objective: Objective,
    pub noisy: bool,
}

impl ModelKey {
    pub fn all() -> Vec<ModelKey> {
        Objective::ALL.iter().flat_map(|&objective| [false, true].map(|noisy| ModelKey { objective, noisy })).collect()
    }

    /// Stable identifier such as `bayesian-noisy`.
    pub fn id(&self) -> String {
        alloc::format!("{}-{}", self.objective.name(), if self.noisy { "noisy" } else { "clean" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelKey,
    pub response: ResponseKind,
}

impl Cell {
    pub fn label(&self) -> String {
        alloc::format!("{}/{}", self.model.id(), response_name(self.response))
    }
}

pub fn response_name(kind: ResponseKind) -> &'static str {
    match kind {
        ResponseKind::Logistic => "logistic",
        ResponseKind::Btrm => "btrm",
    }
}

/// All twelve cells, objective-major.
pub fn grid() -> Vec<Cell> {
    ModelKey::all()
        .into_iter()
        .flat_map(|model| [ResponseKind::Logistic, ResponseKind::Btrm].map(|response| Cell { model, response }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub budget: usize,
    pub pool_size: usize,
    pub k: f64,
    pub margin: f64,
    pub star_sigma: f64,
    pub mcmc: McmcConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = ResponseConfig::default();
        ExperimentConfig {
            trials: 20,
            budget: 30,
            pool_size: crate::session::DEFAULT_POOL_SIZE,
            k: r.k,
            margin: r.margin,
            star_sigma: r.star_sigma,
            mcmc: McmcConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn response(&self, kind: ResponseKind) -> ResponseConfig {
        ResponseConfig { kind, k: self.k, margin: self.margin, star_sigma: self.star_sigma }
    }

    pub fn session(&self, kind: ResponseKind, trial: usize) -> SessionConfig {
        SessionConfig {
            response: self.response(kind),
            mcmc: self.mcmc,
            budget: self.budget,
            seed: derive_seed(self.seed, &[SESSION_STREAM, trial as u64]),
        }
    }
}

/// Dataset indices of the query pool and of the remaining target candidates.
pub fn pool_and_targets(dataset: &Dataset, pool_size: usize) -> Result<(&[usize], &[usize]), ExperimentError> {
    if dataset.test.len() <= pool_size || pool_size < 2 {
        return Err(ExperimentError::SplitTooSmall { pool: pool_size, got: dataset.test.len() });
    }
    Ok(dataset.test.split_at(pool_size))
}

/// Target dataset index for a trial; shared by all cells.
pub fn trial_target(targets: &[usize], seed: u64, trial: usize) -> usize {
    let mut rng = stream(seed, &[TARGET_STREAM, trial as u64]);
    targets[rng.random_range(0..targets.len())]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub cell: Cell,
    pub trial: usize,
    pub trajectory: Trajectory,
}

impl TrialResult {
    /// Loss after each query, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.trajectory.records.iter().map(|r| r.metadata_loss.unwrap_or(f64::NAN)).collect()
    }
}

/// Runs one trial of one cell.
pub fn run_trial<T: Real>(
    vae: &Vae<T>,
    pool: &Pool,
    dataset: &Dataset,
    cell: Cell,
    cfg: &ExperimentConfig,
    trial: usize,
) -> Result<TrialResult, ExperimentError> {
    let (_, targets) = pool_and_targets(dataset, cfg.pool_size)?;
    let item = &dataset.items[trial_target(targets, cfg.seed, trial)];
    let target = dataset.standardizer.apply(&item.metadata);
    let loc = Localizer::new(vae, pool, &dataset.standardizer);
    let trajectory = run_session(&loc, cfg.session(cell.response, trial), Some((Some(item.id), target)), &mut SyntheticOracle { target })?;
    Ok(TrialResult { cell, trial, trajectory })
}

/// Every (cell, trial) unit of work in output order.
pub fn work_units(cfg: &ExperimentConfig) -> Vec<(Cell, usize)> {
    grid().into_iter().flat_map(|c| (0..cfg.trials).map(move |t| (c, t))).collect()
}

/// Trained model and encoded pool for one training condition.
pub struct PreparedModel<'a, T> {
    pub vae: &'a Vae<T>,
    pub pool: Pool,
}

/// Encodes the query pool under every model.
pub fn prepare<'a, T: Real>(
    models: &[(ModelKey, &'a Vae<T>)],
    dataset: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<(ModelKey, PreparedModel<'a, T>)>, ExperimentError> {
    let (pool_idx, _) = pool_and_targets(dataset, cfg.pool_size)?;
    let mut out = Vec::new();
    for key in ModelKey::all() {
        let vae = models
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| ExperimentError::MissingModel(key.id()))?;
        out.push((key, PreparedModel { vae, pool: Pool::build(vae, dataset, pool_idx)? }));
    }
    Ok(out)
}

/// Runs the whole grid sequentially.
pub fn run_experiment<T: Real>(
    models: &[(ModelKey, &Vae<T>)],
    dataset: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrialResult>, ExperimentError> {
    let prepared = prepare(models, dataset, cfg)?;
    work_units(cfg)
        .into_iter()
        .map(|(cell, trial)| {
            let p = &prepared.iter().find(|(k, _)| *k == cell.model).expect("prepared every key").1;
            run_trial(p.vae, &p.pool, dataset, cell, cfg, trial)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: Cell,
    pub query_index: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Median and quartiles of the loss across trials for every cell and query
/// index (1-based). Query 0 is reported by [`baseline_summary`].
pub fn summarize(results: &[TrialResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for cell in grid() {
        let cell_results: Vec<&TrialResult> = results.iter().filter(|r| r.cell == cell).collect();
        let Some(len) = cell_results.iter().map(|r| r.trajectory.records.len()).max() else { continue };
        for q in 0..len {
            let values: Vec<f64> =
                cell_results.iter().filter_map(|r| r.trajectory.records.get(q).and_then(|rec| rec.metadata_loss)).collect();
            if let Some((q1, median, q3)) = quartiles(&values) {
                rows.push(SummaryRow { cell, query_index: q + 1, median, q1, q3 });
            }
        }
    }
    rows
}

/// Query-0 (decoded prior mean) loss quartiles per cell.
pub fn baseline_summary(results: &[TrialResult]) -> Vec<SummaryRow> {
    grid()
        .into_iter()
        .filter_map(|cell| {
            let values: Vec<f64> =
                results.iter().filter(|r| r.cell == cell).filter_map(|r| r.trajectory.baseline_loss).collect();
            quartiles(&values).map(|(q1, median, q3)| SummaryRow { cell, query_index: 0, median, q1, q3 })
        })
        .collect()
}

/// Median loss of a cell at a query index (0 is the baseline).
pub fn median_at(results: &[TrialResult], cell: Cell, query_index: usize) -> Option<f64> {
    let rows = if query_index == 0 { baseline_summary(results) } else { summarize(results) };
    rows.into_iter().find(|r| r.cell == cell && r.query_index == query_index).map(|r| r.median)
}

/// Final-query loss of one model under the logistic response at one `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub model: ModelKey,
    pub k: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// One logistic trial with `k` overridden. Targets, pairs and chain seeds do
/// not depend on `k`, so trials stay paired across the sweep and with the grid.
pub fn k_sweep_trial<T: Real>(
    vae: &Vae<T>,
    pool: &Pool,
    dataset: &Dataset,
    model: ModelKey,
    cfg: &ExperimentConfig,
    k: f64,
    trial: usize,
) -> Result<TrialResult, ExperimentError> {
    run_trial(vae, pool, dataset, Cell { model, response: ResponseKind::Logistic }, &ExperimentConfig { k, ..*cfg }, trial)
}

/// Quartiles of the last recorded loss per `k`; `results[i]` pairs a `ks` index with a trial.
pub fn k_sweep_rows(model: ModelKey, ks: &[f64], results: &[(usize, TrialResult)]) -> Vec<KSweepRow> {
    ks.iter()
        .enumerate()
        .filter_map(|(i, &k)| {
            let finals: Vec<f64> = results
                .iter()
                .filter(|(j, _)| *j == i)
                .filter_map(|(_, r)| r.trajectory.records.last().and_then(|rec| rec.metadata_loss))
                .collect();
            quartiles(&finals).map(|(q1, median, q3)| KSweepRow { model, k, median, q1, q3 })
        })
        .collect()
}

/// Sensitivity of one model's logistic localization to `k`, run sequentially.
pub fn logistic_k_sweep<T: Real>(
    vae: &Vae<T>,
    pool: &Pool,
    dataset: &Dataset,
    model: ModelKey,
    cfg: &ExperimentConfig,
    ks: &[f64],
) -> Result<Vec<KSweepRow>, ExperimentError> {
    if ks.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
        return Err(ExperimentError::InvalidConfig("logistic k must be positive".into()));
    }
    let mut results = Vec::new();
    for i in 0..ks.len() {
        for trial in 0..cfg.trials {
            results.push((i, k_sweep_trial(vae, pool, dataset, model, cfg, ks[i], trial)?));
        }
    }
    Ok(k_sweep_rows(model, ks, &results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::DatasetConfig;
    use crate::vae::LatentSplit;

    #[test]
    fn grid_has_twelve_distinct_cells() {
        let g = grid();
        assert_eq!(g.len(), 12);
        for (i, a) in g.iter().enumerate() {
            assert!(g[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn missing_model_is_named() {
        let data = Dataset::generate(&DatasetConfig { size: 120, test_size: 60, ..Default::default() }, &mut stream(1, &[])).unwrap();
        let vae = Vae::<f32>::new(LatentSplit::default(), &mut stream(1, &[1]));
        let cfg = ExperimentConfig { pool_size: 30, ..Default::default() };
        let models: Vec<(ModelKey, &Vae<f32>)> =
            ModelKey::all().into_iter().filter(|k| k.id() != "traditional-noisy").map(|k| (k, &vae)).collect();
        match run_experiment(&models, &data, &cfg) {
            Err(ExperimentError::MissingModel(id)) => assert_eq!(id, "traditional-noisy"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_grid_is_deterministic_and_complete() {
        let data = Dataset::generate(&DatasetConfig { size: 120, test_size: 60, ..Default::default() }, &mut stream(2, &[])).unwrap();
        let vae = Vae::<f32>::new(LatentSplit::default(), &mut stream(2, &[1]));
        let cfg = ExperimentConfig {
            trials: 2,
            budget: 3,
            pool_size: 30,
            mcmc: McmcConfig { iterations: 300, burn_in: 100, ..Default::default() },
            seed: 4,
            ..Default::default()
        };
        let models: Vec<(ModelKey, &Vae<f32>)> = ModelKey::all().into_iter().map(|k| (k, &vae)).collect();
        let a = run_experiment(&models, &data, &cfg).unwrap();
        let b = run_experiment(&models, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24);
        let rows = summarize(&a);
        assert_eq!(rows.len(), 12 * 3);
        assert!(rows.iter().all(|r| r.q1 <= r.median && r.median <= r.q3));
        assert_eq!(baseline_summary(&a).len(), 12);
        // Trials are paired: same target and same pairs in every cell.
        for t in 0..2 {
            let same: Vec<&TrialResult> = a.iter().filter(|r| r.trial == t).collect();
            assert!(same.iter().all(|r| r.trajectory.target_id == same[0].trajectory.target_id));
            assert!(same.iter().all(|r| r.trajectory.records[0].a == same[0].trajectory.records[0].a));
        }
    }

    #[test]
    fn k_sweep_at_the_grid_k_reproduces_the_logistic_cell() {
        let data = Dataset::generate(&DatasetConfig { size: 120, test_size: 60, ..Default::default() }, &mut stream(3, &[])).unwrap();
        let vae = Vae::<f32>::new(LatentSplit::default(), &mut stream(3, &[1]));
        let cfg = ExperimentConfig {
            trials: 3,
            budget: 2,
            pool_size: 30,
            mcmc: McmcConfig { iterations: 300, burn_in: 100, ..Default::default() },
            seed: 8,
            ..Default::default()
        };
        let key = ModelKey { objective: Objective::Bayesian, noisy: true };
        let pool = Pool::build(&vae, &data, pool_and_targets(&data, 30).unwrap().0).unwrap();
        let rows = logistic_k_sweep(&vae, &pool, &data, key, &cfg, &[1.0, cfg.k]).unwrap();
        assert_eq!(rows.len(), 2);
        let cell = Cell { model: key, response: ResponseKind::Logistic };
        let grid: Vec<TrialResult> = (0..3).map(|t| run_trial(&vae, &pool, &data, cell, &cfg, t).unwrap()).collect();
        assert_eq!(Some(rows[1].median), median_at(&grid, cell, 2));
        assert!(logistic_k_sweep(&vae, &pool, &data, key, &cfg, &[0.0]).is_err());
    }
}
