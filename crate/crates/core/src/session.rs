//! Localization sessions.
//!
//! A session repeatedly shows a pair of pool images, records which one the
//! oracle prefers, re-samples the ideal-point posterior from all answers so
//! far and decodes the posterior mean. [`SessionState`] is plain data so a
//! session can be suspended, serialized and resumed; [`Localizer`] holds the
//! model and pool needed to advance it.
//!
//! Query pairs and MCMC seeds depend only on the session seed and the query
//! index, so replaying the same answers reproduces the same posteriors.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{sample_posterior, InferenceError, McmcConfig};
use crate::math::{sqrt, squared_distance};
use crate::nnet::Real;
use crate::response::{AnsweredQuery, GaussianEmbedding, ResponseConfig};
use crate::rng::{derive_seed, standard_normal, stream};
use crate::synthworld::{measure_metadata, oracle_answer, Choice, Dataset, Image, MetaVec, Standardizer, SynthError};
use crate::vae::{Vae, VaeError};

pub const DEFAULT_POOL_SIZE: usize = 500;

const PAIR_STREAM: u64 = 1;
const MCMC_STREAM: u64 = 2;
const Z_STREAM: u64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("query pool needs at least two items, got {0}")]
    PoolTooSmall(usize),
    #[error("query budget must be at least 1")]
    ZeroBudget,
    #[error("session is finished")]
    Finished,
    #[error("unknown pool item {0}")]
    UnknownItem(u32),
    #[error("oracle failed: {0}; session suspended")]
    Oracle(OracleError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("timed out waiting for an answer")]
    Timeout,
    #[error("no scripted answers left")]
    Exhausted,
    #[error("{0}")]
    Unavailable(String),
}

/// A candidate image with its embedding under one model and its clean
/// standardized metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: u32,
    pub image: Image,
    pub embedding: GaussianEmbedding,
    pub metadata: MetaVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub items: Vec<PoolItem>,
}

impl Pool {
    /// Encodes the dataset items at `indices`.
    pub fn build<T: Real>(vae: &Vae<T>, dataset: &Dataset, indices: &[usize]) -> Result<Self, SessionError> {
        if indices.len() < 2 {
            return Err(SessionError::PoolTooSmall(indices.len()));
        }
        let encoded = vae.encode_images(indices.iter().map(|&i| &dataset.items[i].image));
        let items = indices
            .iter()
            .zip(encoded)
            .map(|(&i, e)| {
                let item = &dataset.items[i];
                PoolItem {
                    id: item.id,
                    image: item.image.clone(),
                    embedding: e.r,
                    metadata: dataset.standardizer.apply(&item.metadata),
                }
            })
            .collect();
        Ok(Pool { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: u32) -> Result<&PoolItem, SessionError> {
        self.items.iter().find(|it| it.id == id).ok_or(SessionError::UnknownItem(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub response: ResponseConfig,
    /// Sampler settings; the seed field is replaced per query.
    pub mcmc: McmcConfig,
    pub budget: usize,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { response: ResponseConfig::default(), mcmc: McmcConfig::default(), budget: 30, seed: 0 }
    }
}

/// A pair awaiting an answer. `index` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPair {
    pub index: usize,
    pub a: u32,
    pub b: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub index: usize,
    pub a: u32,
    pub b: u32,
    pub choice: Choice,
    pub posterior_mean: Vec<f64>,
    pub posterior_std: Vec<f64>,
    pub acceptance_rate: f64,
    /// Metadata loss of the decoded posterior mean, when the target is known.
    pub metadata_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingAnswer,
    Suspended,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub config: SessionConfig,
    /// Clean standardized metadata of the envisioned item, if known.
    pub target: Option<MetaVec>,
    pub target_id: Option<u32>,
    pub status: SessionStatus,
    pub pending: Option<QueryPair>,
    pub records: Vec<QueryRecord>,
    /// Metadata loss of the decoded prior mean.
    pub baseline_loss: Option<f64>,
}

impl SessionState {
    pub fn answered(&self) -> usize {
        self.records.len()
    }

    /// Latest posterior mean, or the prior mean before any answer.
    pub fn posterior_mean(&self, dim: usize) -> Vec<f64> {
        self.records.last().map_or_else(|| alloc::vec![0.0; dim], |r| r.posterior_mean.clone())
    }

    pub fn posterior_std(&self, dim: usize) -> Vec<f64> {
        self.records.last().map_or_else(|| alloc::vec![1.0; dim], |r| r.posterior_std.clone())
    }
}

/// Result of a completed session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub target_id: Option<u32>,
    pub baseline_loss: Option<f64>,
    pub records: Vec<QueryRecord>,
    pub final_image: Image,
    pub nearest_neighbor: u32,
}

impl Trajectory {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.metadata_loss)
    }
}

/// Answers queries for a session.
pub trait Oracle {
    fn answer(&mut self, a: &PoolItem, b: &PoolItem, index: usize) -> Result<Choice, OracleError>;
}

/// Prefers whichever item's clean metadata is closer to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracle {
    pub target: MetaVec,
}

impl Oracle for SyntheticOracle {
    fn answer(&mut self, a: &PoolItem, b: &PoolItem, _index: usize) -> Result<Choice, OracleError> {
        oracle_answer(&self.target, &a.metadata, &b.metadata).map_err(|e| OracleError::Unavailable(alloc::format!("{e}")))
    }
}

/// Replays a fixed list of answers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedOracle {
    pub choices: Vec<Choice>,
    pub next: usize,
}

impl ScriptedOracle {
    pub fn new(choices: Vec<Choice>) -> Self {
        ScriptedOracle { choices, next: 0 }
    }
}

impl Oracle for ScriptedOracle {
    fn answer(&mut self, _a: &PoolItem, _b: &PoolItem, _index: usize) -> Result<Choice, OracleError> {
        let c = *self.choices.get(self.next).ok_or(OracleError::Exhausted)?;
        self.next += 1;
        Ok(c)
    }
}

/// ℓ2 distance between the measured, standardized metadata of `estimate` and `target`.
pub fn metadata_loss(estimate: &Image, target: &MetaVec, standardizer: &Standardizer) -> Result<f64, SynthError> {
    let measured = standardizer.apply(&measure_metadata(estimate)?);
    Ok(sqrt(squared_distance(&measured, target)))
}

/// Loss recorded when a decode has no measurable ink: the largest distance
/// from any pool item to the target.
pub fn sentinel_loss(pool: &Pool, target: &MetaVec) -> f64 {
    pool.items.iter().map(|it| sqrt(squared_distance(&it.metadata, target))).fold(0.0, f64::max)
}

/// Pool item whose embedding mean is closest to `r`; ties go to the lowest id.
pub fn nearest_neighbor_estimate(r: &[f64], pool: &Pool) -> Option<u32> {
    pool.items
        .iter()
        .map(|it| (squared_distance(&it.embedding.mu, r), it.id))
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
        .map(|(_, id)| id)
}

/// Model, pool and standardizer shared by the sessions that use them.
#[derive(Debug, Clone, Copy)]
pub struct Localizer<'a, T> {
    pub vae: &'a Vae<T>,
    pub pool: &'a Pool,
    pub standardizer: &'a Standardizer,
}

impl<'a, T: Real> Localizer<'a, T> {
    pub fn new(vae: &'a Vae<T>, pool: &'a Pool, standardizer: &'a Standardizer) -> Self {
        Localizer { vae, pool, standardizer }
    }

    fn r_dim(&self) -> usize {
        self.vae.split.r_dim
    }

    /// Opens a session and draws its first pair.
    pub fn start(&self, config: SessionConfig, target: Option<(Option<u32>, MetaVec)>) -> Result<SessionState, SessionError> {
        if config.budget == 0 {
            return Err(SessionError::ZeroBudget);
        }
        if self.pool.len() < 2 {
            return Err(SessionError::PoolTooSmall(self.pool.len()));
        }
        let mut state = SessionState {
            config,
            target: target.map(|t| t.1),
            target_id: target.and_then(|t| t.0),
            status: SessionStatus::AwaitingAnswer,
            pending: Some(self.pair(config.seed, 1)),
            records: Vec::new(),
            baseline_loss: None,
        };
        if state.target.is_some() {
            let prior = self.decode(&state, &alloc::vec![0.0; self.r_dim()])?;
            state.baseline_loss = self.loss_of(&state, &prior);
        }
        Ok(state)
    }

    /// Uniformly random distinct pair for query `index`.
    pub fn pair(&self, seed: u64, index: usize) -> QueryPair {
        let mut rng = stream(seed, &[PAIR_STREAM, index as u64]);
        let n = self.pool.len();
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        QueryPair { index, a: self.pool.items[a].id, b: self.pool.items[b].id }
    }

    /// The answered comparisons of a session as response-model inputs.
    pub fn queries(&self, state: &SessionState) -> Result<Vec<AnsweredQuery>, SessionError> {
        state.records.iter().map(|r| self.answered_query(r.a, r.b, r.choice)).collect()
    }

    fn answered_query(&self, a: u32, b: u32, choice: Choice) -> Result<AnsweredQuery, SessionError> {
        let (pa, pb) = (self.pool.get(a)?, self.pool.get(b)?);
        let (pref, rej) = match choice {
            Choice::A => (pa, pb),
            Choice::B => (pb, pa),
        };
        let mut q = AnsweredQuery::new(pref.embedding.clone(), rej.embedding.clone());
        q.preferred_id = Some(pref.id);
        q.rejected_id = Some(rej.id);
        Ok(q)
    }

    /// Decodes `r` with the session's fixed reconstructive code.
    pub fn decode(&self, state: &SessionState, r: &[f64]) -> Result<Image, SessionError> {
        let z_dim = self.vae.split.z_dim;
        let mut rng = stream(state.config.seed, &[Z_STREAM]);
        let z: Vec<f64> = (0..z_dim).map(|_| standard_normal(&mut rng)).collect();
        Ok(self.vae.decode(r, &z)?)
    }

    /// Decoded posterior mean (prior mean before any answer).
    pub fn estimate(&self, state: &SessionState) -> Result<Image, SessionError> {
        self.decode(state, &state.posterior_mean(self.r_dim()))
    }

    fn loss_of(&self, state: &SessionState, img: &Image) -> Option<f64> {
        let target = state.target.as_ref()?;
        Some(metadata_loss(img, target, self.standardizer).unwrap_or_else(|_| sentinel_loss(self.pool, target)))
    }

    /// Records an answer to the pending pair and re-samples the posterior.
    pub fn answer(&self, state: &mut SessionState, choice: Choice) -> Result<QueryRecord, SessionError> {
        if state.status == SessionStatus::Finished {
            return Err(SessionError::Finished);
        }
        let pair = state.pending.ok_or(SessionError::Finished)?;
        let mut queries = self.queries(state)?;
        queries.push(self.answered_query(pair.a, pair.b, choice)?);
        let mcmc = McmcConfig { seed: derive_seed(state.config.seed, &[MCMC_STREAM, pair.index as u64]), ..state.config.mcmc };
        let post = sample_posterior(self.r_dim(), &queries, &state.config.response, &mcmc)?;
        let mut record = QueryRecord {
            index: pair.index,
            a: pair.a,
            b: pair.b,
            choice,
            posterior_mean: post.mean,
            posterior_std: post.std,
            acceptance_rate: post.acceptance_rate,
            metadata_loss: None,
        };
        if state.target.is_some() {
            let img = self.decode(state, &record.posterior_mean)?;
            record.metadata_loss = self.loss_of(state, &img);
        }
        state.records.push(record.clone());
        if state.records.len() >= state.config.budget {
            state.pending = None;
            state.status = SessionStatus::Finished;
        } else {
            state.pending = Some(self.pair(state.config.seed, pair.index + 1));
            state.status = SessionStatus::AwaitingAnswer;
        }
        Ok(record)
    }

    /// Summarizes a finished session.
    pub fn trajectory(&self, state: &SessionState) -> Result<Trajectory, SessionError> {
        let mean = state.posterior_mean(self.r_dim());
        Ok(Trajectory {
            seed: state.config.seed,
            target_id: state.target_id,
            baseline_loss: state.baseline_loss,
            records: state.records.clone(),
            final_image: self.decode(state, &mean)?,
            nearest_neighbor: nearest_neighbor_estimate(&mean, self.pool).expect("pool is non-empty"),
        })
    }

    /// Drives a session until its budget is spent. An oracle failure marks
    /// the state suspended; calling again resumes from the pending pair.
    pub fn run(&self, state: &mut SessionState, oracle: &mut dyn Oracle) -> Result<Trajectory, SessionError> {
        while let Some(pair) = state.pending {
            let (a, b) = (self.pool.get(pair.a)?, self.pool.get(pair.b)?);
            match oracle.answer(a, b, pair.index) {
                Ok(choice) => {
                    self.answer(state, choice)?;
                }
                Err(e) => {
                    state.status = SessionStatus::Suspended;
                    return Err(SessionError::Oracle(e));
                }
            }
        }
        self.trajectory(state)
    }
}

/// Runs a complete session from scratch.
pub fn run_session<T: Real>(
    localizer: &Localizer<'_, T>,
    config: SessionConfig,
    target: Option<(Option<u32>, MetaVec)>,
    oracle: &mut dyn Oracle,
) -> Result<Trajectory, SessionError> {
    let mut state = localizer.start(config, target)?;
    localizer.run(&mut state, oracle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::DatasetConfig;
    use crate::vae::LatentSplit;

    struct World {
        data: Dataset,
        vae: Vae<f32>,
        pool: Pool,
    }

    fn world() -> World {
        let data = Dataset::generate(&DatasetConfig { size: 200, test_size: 100, ..Default::default() }, &mut stream(60, &[])).unwrap();
        let vae = Vae::<f32>::new(LatentSplit::default(), &mut stream(60, &[1]));
        let pool = Pool::build(&vae, &data, &data.test[..50]).unwrap();
        World { data, vae, pool }
    }

    fn quick(budget: usize, seed: u64) -> SessionConfig {
        SessionConfig { budget, seed, mcmc: McmcConfig { iterations: 600, burn_in: 200, ..Default::default() }, ..Default::default() }
    }

    fn target(w: &World, i: usize) -> (Option<u32>, MetaVec) {
        let item = &w.data.items[w.data.test[i]];
        (Some(item.id), w.data.standardizer.apply(&item.metadata))
    }

    #[test]
    fn single_query_session() {
        let w = world();
        let loc = Localizer::new(&w.vae, &w.pool, &w.data.standardizer);
        let t = target(&w, 70);
        let traj = run_session(&loc, quick(1, 3), Some(t), &mut SyntheticOracle { target: t.1 }).unwrap();
        assert_eq!(traj.records.len(), 1);
        assert!(traj.final_image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(traj.baseline_loss.is_some() && traj.records[0].metadata_loss.is_some());
    }

    #[test]
    fn sessions_are_reproducible_and_replayable() {
        let w = world();
        let loc = Localizer::new(&w.vae, &w.pool, &w.data.standardizer);
        let t = target(&w, 80);
        let a = run_session(&loc, quick(5, 9), Some(t), &mut SyntheticOracle { target: t.1 }).unwrap();
        let b = run_session(&loc, quick(5, 9), Some(t), &mut SyntheticOracle { target: t.1 }).unwrap();
        assert_eq!(a, b);
        for r in &a.records {
            let (pa, pb) = (w.pool.get(r.a).unwrap(), w.pool.get(r.b).unwrap());
            assert_ne!(r.a, r.b);
            assert_eq!(r.choice, oracle_answer(&t.1, &pa.metadata, &pb.metadata).unwrap());
        }
        let script: Vec<Choice> = a.records.iter().map(|r| r.choice).collect();
        let replay = run_session(&loc, quick(5, 9), Some(t), &mut ScriptedOracle::new(script)).unwrap();
        assert_eq!(replay, a);
    }

    #[test]
    fn oracle_failure_suspends_and_resumes() {
        let w = world();
        let loc = Localizer::new(&w.vae, &w.pool, &w.data.standardizer);
        let t = target(&w, 90);
        let full = run_session(&loc, quick(4, 5), Some(t), &mut SyntheticOracle { target: t.1 }).unwrap();
        let script: Vec<Choice> = full.records.iter().map(|r| r.choice).collect();
        let mut state = loc.start(quick(4, 5), Some(t)).unwrap();
        let err = loc.run(&mut state, &mut ScriptedOracle::new(script[..2].to_vec())).unwrap_err();
        assert_eq!(err, SessionError::Oracle(OracleError::Exhausted));
        assert_eq!(state.status, SessionStatus::Suspended);
        assert_eq!(state.answered(), 2);
        let resumed = loc.run(&mut state, &mut ScriptedOracle::new(script[2..].to_vec())).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(loc.answer(&mut state, Choice::A), Err(SessionError::Finished));
    }

    #[test]
    fn invalid_sessions_are_rejected() {
        let w = world();
        let loc = Localizer::new(&w.vae, &w.pool, &w.data.standardizer);
        assert_eq!(loc.start(quick(0, 1), None).unwrap_err(), SessionError::ZeroBudget);
        assert!(matches!(Pool::build(&w.vae, &w.data, &w.data.test[..1]), Err(SessionError::PoolTooSmall(1))));
    }

    #[test]
    fn metadata_loss_rules() {
        let w = world();
        let item = &w.data.items[0];
        let target = w.data.standardizer.apply(&item.metadata);
        assert!(metadata_loss(&item.image, &target, &w.data.standardizer).unwrap() <= 1e-9);
        let other = &w.data.items[1];
        let other_target = w.data.standardizer.apply(&other.metadata);
        let ab = metadata_loss(&item.image, &other_target, &w.data.standardizer).unwrap();
        let ba = metadata_loss(&other.image, &target, &w.data.standardizer).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let expected = sqrt(squared_distance(&target, &other_target));
        assert!((ab - expected).abs() < 1e-12);
        assert!(metadata_loss(&Image::zeros(), &target, &w.data.standardizer).is_err());
        let s = sentinel_loss(&w.pool, &target);
        assert!(w.pool.items.iter().all(|it| sqrt(squared_distance(&it.metadata, &target)) <= s));
    }

    #[test]
    fn hand_computed_metadata_distance() {
        let std = Standardizer { mean: [0.0; 6], std: [1.0; 6] };
        let img = crate::synthworld::render_stroke(&crate::synthworld::StrokeParams {
            slant: 0.0,
            thickness: 3.0,
            length: 16.0,
            center_dx: 0.0,
            center_dy: 0.0,
        })
        .unwrap();
        let m = measure_metadata(&img).unwrap().to_array();
        let mut target = m;
        target[0] += 3.0;
        target[3] -= 4.0;
        assert!((metadata_loss(&img, &target, &std).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_neighbor_rules() {
        let w = world();
        let it = &w.pool.items[7];
        assert_eq!(nearest_neighbor_estimate(&it.embedding.mu, &w.pool), Some(it.id));
        let mut shuffled = w.pool.clone();
        shuffled.items.reverse();
        let r = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1];
        assert_eq!(nearest_neighbor_estimate(&r, &w.pool), nearest_neighbor_estimate(&r, &shuffled));
        let brute = w
            .pool
            .items
            .iter()
            .min_by(|a, b| squared_distance(&a.embedding.mu, &r).total_cmp(&squared_distance(&b.embedding.mu, &r)))
            .unwrap()
            .id;
        assert_eq!(nearest_neighbor_estimate(&r, &w.pool), Some(brute));
        let mut tie = w.pool.clone();
        tie.items[3].embedding = tie.items[9].embedding.clone();
        let (lo, hi) = (tie.items[3].id.min(tie.items[9].id), tie.items[3].id.max(tie.items[9].id));
        assert_eq!(nearest_neighbor_estimate(&tie.items[9].embedding.mu.clone(), &tie), Some(lo));
        assert_ne!(lo, hi);
    }
}
