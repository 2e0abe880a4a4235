//! Posterior sampling for the ideal point.
//!
//! The prior over `r*` is the standard isotropic Gaussian and each answered
//! query contributes a response-model likelihood. Sampling uses a
//! Metropolis-Hastings chain whose proposal is the prior-preserving
//! Gaussian random walk `r' = √(1 − β²) r + β ξ`. The acceptance ratio then
//! involves only the likelihood, and with no queries the chain draws the
//! prior exactly once `β` reaches 1. `β` is adapted toward the target
//! acceptance rate during burn-in and frozen afterwards.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{exp, log, sqrt};
use crate::response::{log_likelihood, AnsweredQuery, ResponseConfig};
use crate::rng::{standard_normal, stream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error("no posterior draws")]
    EmptyDraws,
    #[error("invalid MCMC configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    /// Total iterations including burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    /// Initial innovation scale `β`.
    pub initial_step: f64,
    pub target_acceptance: f64,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig { iterations: 5000, burn_in: 1000, initial_step: 0.5, target_acceptance: 0.234, seed: 0 }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.burn_in >= self.iterations {
            return Err(InferenceError::InvalidConfig("burn_in must be below iterations"));
        }
        if !(self.initial_step > 0.0) {
            return Err(InferenceError::InvalidConfig("initial_step must be positive"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(InferenceError::InvalidConfig("target_acceptance must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Post-burn-in draws with their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub draws: Vec<Vec<f64>>,
    /// Whether the move producing each kept draw was accepted.
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Innovation scale after burn-in adaptation.
    pub step: f64,
    pub burn_in: usize,
}

fn log_prior(r: &[f64]) -> f64 {
    -0.5 * (r.iter().map(|x| x * x).sum::<f64>() + r.len() as f64 * LN_2PI)
}

/// Sum of query log-likelihoods at `r`.
pub fn log_likelihood_sum(r: &[f64], queries: &[AnsweredQuery], cfg: &ResponseConfig) -> f64 {
    queries.iter().map(|q| log_likelihood(r, q, cfg)).sum()
}

/// `log N(r; 0, I) + Σ log p(q | r)`.
pub fn log_posterior(r: &[f64], queries: &[AnsweredQuery], cfg: &ResponseConfig) -> f64 {
    log_prior(r) + log_likelihood_sum(r, queries, cfg)
}

/// Arithmetic mean and population std of the draws.
pub fn posterior_estimate(draws: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), InferenceError> {
    let first = draws.first().ok_or(InferenceError::EmptyDraws)?;
    let count = draws.len() as f64;
    let dim = first.len();
    let mut mean = alloc::vec![0.0; dim];
    for d in draws {
        for (m, x) in mean.iter_mut().zip(d) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = alloc::vec![0.0; dim];
    for d in draws {
        for ((v, x), m) in var.iter_mut().zip(d).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| sqrt(v / count)).collect();
    Ok((mean, std))
}

/// Samples `N(0, I) × exp(log_lik)` in `dim` dimensions starting from the origin.
pub fn run_mcmc<F>(dim: usize, log_lik: F, cfg: &McmcConfig) -> Result<PosteriorSamples, InferenceError>
where
    F: Fn(&[f64]) -> f64,
{
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[0x4d43_4d43]);
    let mut current = alloc::vec![0.0; dim];
    let mut current_ll = log_lik(&current);
    let mut proposal = alloc::vec![0.0; dim];
    let mut log_step = log(cfg.initial_step.min(1.0));
    let kept = cfg.iterations - cfg.burn_in;
    let mut draws = Vec::with_capacity(kept);
    let mut accepted = Vec::with_capacity(kept);

    for iter in 0..cfg.iterations {
        let step = exp(log_step);
        let keep = sqrt((1.0 - step * step).max(0.0));
        for (p, c) in proposal.iter_mut().zip(&current) {
            *p = keep * c + step * standard_normal(&mut rng);
        }
        let proposal_ll = log_lik(&proposal);
        let log_alpha = proposal_ll - current_ll;
        let u: f64 = rand::Rng::random(&mut rng);
        // NaN likelihoods are rejected.
        let accept = log_alpha >= 0.0 || log(u) < log_alpha;
        if accept {
            core::mem::swap(&mut current, &mut proposal);
            current_ll = proposal_ll;
        }
        if iter < cfg.burn_in {
            let alpha = if log_alpha >= 0.0 { 1.0 } else if log_alpha.is_nan() { 0.0 } else { exp(log_alpha) };
            let gain = 1.0 / libm::pow(iter as f64 + 1.0, 0.6);
            log_step = (log_step + gain * (alpha - cfg.target_acceptance)).clamp(-12.0, 0.0);
        } else {
            draws.push(current.clone());
            accepted.push(accept);
        }
    }

    let (mean, std) = posterior_estimate(&draws)?;
    let acceptance_rate = accepted.iter().filter(|&&a| a).count() as f64 / accepted.len() as f64;
    Ok(PosteriorSamples { draws, accepted, acceptance_rate, mean, std, step: exp(log_step), burn_in: cfg.burn_in })
}

/// Posterior over the ideal point given answered queries.
pub fn sample_posterior(
    dim: usize,
    queries: &[AnsweredQuery],
    response: &ResponseConfig,
    cfg: &McmcConfig,
) -> Result<PosteriorSamples, InferenceError> {
    run_mcmc(dim, |r| log_likelihood_sum(r, queries, response), cfg)
}
