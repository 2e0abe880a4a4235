//! User response models for paired comparisons.
//!
//! Given a hypothesized ideal point `r*`, a response model gives the
//! probability that a user prefers the item embedded at `p` over the one at
//! `n`. The logistic model looks only at embedding means. The Bayesian
//! triplet response model (BTRM) treats all three points as independent
//! Gaussians and approximates `τ = ‖s − p‖² − ‖s − n‖²` by a Gaussian with
//! matched moments; the user picks `p` when `τ < −margin`.
//!
//! # Moments of τ
//!
//! Per dimension, with `s ~ N(μs, σs²)`, `p ~ N(μp, σp²)`, `n ~ N(μn, σn²)`:
//!
//! ```text
//! E[τ]   = μp² + σp² − μn² − σn² − 2 μs (μp − μn)
//! Var[τ] = 2σp⁴ + 2σn⁴ + 4σp² (σs² + (μs − μp)²) + 4σn² (σs² + (μs − μn)²) + 4σs² (μp − μn)²
//! ```
//!
//! and dimensions add. A commonly printed form of these moments has `+σn²` in
//! the mean and a variance that stays positive when every σ is zero; both
//! disagree with Monte Carlo, so the forms above are the ones implemented and
//! the unit tests check them against sampling.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{ln_normal_cdf, ln_sigmoid, normal_cdf, sigmoid, sqrt, squared_distance};
use crate::rng::standard_normal;

/// Diagonal Gaussian over relative-attribute space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(mu.len(), sigma.len(), "mu and sigma must have equal length");
        GaussianEmbedding { mu, sigma }
    }

    /// Zero-variance embedding at `mu`.
    pub fn point(mu: &[f64]) -> Self {
        GaussianEmbedding { mu: mu.to_vec(), sigma: alloc::vec![0.0; mu.len()] }
    }

    pub fn isotropic(mu: &[f64], sigma: f64) -> Self {
        GaussianEmbedding { mu: mu.to_vec(), sigma: alloc::vec![sigma; mu.len()] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseKind {
    #[serde(rename = "logistic")]
    Logistic,
    #[serde(rename = "btrm")]
    Btrm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseConfig {
    pub kind: ResponseKind,
    /// Logistic confidence constant.
    pub k: f64,
    /// BTRM margin; the user picks `p` when `τ < −margin`.
    pub margin: f64,
    /// Per-dimension std given to the ideal-point hypothesis under BTRM.
    pub star_sigma: f64,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        ResponseConfig { kind: ResponseKind::Btrm, k: 10.0, margin: 0.0, star_sigma: 0.0 }
    }
}

impl ResponseConfig {
    pub fn logistic() -> Self {
        ResponseConfig { kind: ResponseKind::Logistic, ..Default::default() }
    }

    pub fn btrm() -> Self {
        ResponseConfig { kind: ResponseKind::Btrm, ..Default::default() }
    }

    pub fn is_valid(&self) -> bool {
        self.k > 0.0 && self.margin >= 0.0 && self.star_sigma >= 0.0
    }
}

/// One answered comparison: the user preferred `preferred` over `rejected`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsweredQuery {
    pub preferred: GaussianEmbedding,
    pub rejected: GaussianEmbedding,
    pub preferred_id: Option<u32>,
    pub rejected_id: Option<u32>,
}

impl AnsweredQuery {
    pub fn new(preferred: GaussianEmbedding, rejected: GaussianEmbedding) -> Self {
        assert_eq!(preferred.dim(), rejected.dim(), "query embeddings must share a dimension");
        AnsweredQuery { preferred, rejected, preferred_id: None, rejected_id: None }
    }

    /// The same comparison answered the other way.
    pub fn swapped(&self) -> Self {
        AnsweredQuery {
            preferred: self.rejected.clone(),
            rejected: self.preferred.clone(),
            preferred_id: self.rejected_id,
            rejected_id: self.preferred_id,
        }
    }
}

/// `σ(k (‖r* − μn‖² − ‖r* − μp‖²))`.
pub fn logistic_likelihood(r_star: &[f64], q: &AnsweredQuery, k: f64) -> f64 {
    sigmoid(k * logistic_margin(r_star, q))
}

pub fn logistic_log_likelihood(r_star: &[f64], q: &AnsweredQuery, k: f64) -> f64 {
    ln_sigmoid(k * logistic_margin(r_star, q))
}

fn logistic_margin(r_star: &[f64], q: &AnsweredQuery) -> f64 {
    squared_distance(r_star, &q.rejected.mu) - squared_distance(r_star, &q.preferred.mu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauMoments {
    pub mean: f64,
    pub variance: f64,
}

impl TauMoments {
    pub fn std(&self) -> f64 {
        sqrt(self.variance.max(0.0))
    }

    /// Gaussian-approximated `P(τ < −margin)`; a step function at zero variance
    /// (0.5 exactly at the threshold).
    pub fn prob_below(&self, margin: f64) -> f64 {
        let sd = self.std();
        if sd == 0.0 {
            let threshold = -margin;
            return if self.mean < threshold {
                1.0
            } else if self.mean > threshold {
                0.0
            } else {
                0.5
            };
        }
        normal_cdf((-margin - self.mean) / sd)
    }

    pub fn ln_prob_below(&self, margin: f64) -> f64 {
        let sd = self.std();
        if sd == 0.0 {
            return crate::math::log(self.prob_below(margin));
        }
        ln_normal_cdf((-margin - self.mean) / sd)
    }
}

// Per-dimension E[τ] and Var[τ]. The σn² term enters the mean with a minus
// sign: E[(s−n)²] = (μs−μn)² + σs² + σn², so it is subtracted. The variant
// with +σn² does not vanish at p = n and disagrees with Monte Carlo
// (`moments_match_monte_carlo` and the acceptance gate both check this).
fn dim_moments(ms: f64, ss: f64, mp: f64, sp: f64, mn: f64, sn: f64) -> (f64, f64) {
    let (ss2, sp2, sn2) = (ss * ss, sp * sp, sn * sn);
    let mean = (mp - mn) * (mp + mn - 2.0 * ms) + (sp2 - sn2);
    let var = 2.0 * sp2 * sp2
        + 2.0 * sn2 * sn2
        + 4.0 * sp2 * (ss2 + (ms - mp) * (ms - mp))
        + 4.0 * sn2 * (ss2 + (ms - mn) * (ms - mn))
        + 4.0 * ss2 * (mp - mn) * (mp - mn);
    (mean, var)
}

/// Moments of `τ = ‖s − p‖² − ‖s − n‖²` for independent diagonal Gaussians.
pub fn tau_moments(star: &GaussianEmbedding, p: &GaussianEmbedding, n: &GaussianEmbedding) -> TauMoments {
    assert!(star.dim() == p.dim() && p.dim() == n.dim(), "embedding dimensions differ");
    let mut out = TauMoments { mean: 0.0, variance: 0.0 };
    for d in 0..star.dim() {
        let (m, v) = dim_moments(star.mu[d], star.sigma[d], p.mu[d], p.sigma[d], n.mu[d], n.sigma[d]);
        out.mean += m;
        out.variance += v;
    }
    out
}

/// Partial derivatives of the τ moments with respect to one embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentPartials {
    pub mean_wrt_mu: Vec<f64>,
    pub mean_wrt_sigma: Vec<f64>,
    pub var_wrt_mu: Vec<f64>,
    pub var_wrt_sigma: Vec<f64>,
}

impl MomentPartials {
    fn zeros(dim: usize) -> Self {
        let z = || alloc::vec![0.0; dim];
        MomentPartials { mean_wrt_mu: z(), mean_wrt_sigma: z(), var_wrt_mu: z(), var_wrt_sigma: z() }
    }
}

/// [`tau_moments`] together with partials for (star, p, n).
pub fn tau_moments_with_partials(
    star: &GaussianEmbedding,
    p: &GaussianEmbedding,
    n: &GaussianEmbedding,
) -> (TauMoments, [MomentPartials; 3]) {
    let dim = star.dim();
    assert!(dim == p.dim() && dim == n.dim(), "embedding dimensions differ");
    let mut parts = [MomentPartials::zeros(dim), MomentPartials::zeros(dim), MomentPartials::zeros(dim)];
    let mut out = TauMoments { mean: 0.0, variance: 0.0 };
    for d in 0..dim {
        let (ms, ss, mp, sp, mn, sn) = (star.mu[d], star.sigma[d], p.mu[d], p.sigma[d], n.mu[d], n.sigma[d]);
        let (m, v) = dim_moments(ms, ss, mp, sp, mn, sn);
        out.mean += m;
        out.variance += v;
        let (ss2, sp2, sn2) = (ss * ss, sp * sp, sn * sn);
        let [s, pp, nn] = &mut parts;
        s.mean_wrt_mu[d] = -2.0 * (mp - mn);
        pp.mean_wrt_mu[d] = 2.0 * (mp - ms);
        nn.mean_wrt_mu[d] = -2.0 * (mn - ms);
        pp.mean_wrt_sigma[d] = 2.0 * sp;
        nn.mean_wrt_sigma[d] = -2.0 * sn;

        s.var_wrt_mu[d] = 8.0 * sp2 * (ms - mp) + 8.0 * sn2 * (ms - mn);
        pp.var_wrt_mu[d] = -8.0 * sp2 * (ms - mp) + 8.0 * ss2 * (mp - mn);
        nn.var_wrt_mu[d] = -8.0 * sn2 * (ms - mn) - 8.0 * ss2 * (mp - mn);
        s.var_wrt_sigma[d] = 8.0 * ss * (sp2 + sn2 + (mp - mn) * (mp - mn));
        pp.var_wrt_sigma[d] = 8.0 * sp * sp2 + 8.0 * sp * (ss2 + (ms - mp) * (ms - mp));
        nn.var_wrt_sigma[d] = 8.0 * sn * sn2 + 8.0 * sn * (ss2 + (ms - mn) * (ms - mn));
    }
    (out, parts)
}

fn star_embedding(r_star: &[f64], cfg: &ResponseConfig) -> GaussianEmbedding {
    GaussianEmbedding::isotropic(r_star, cfg.star_sigma)
}

/// BTRM: `P(τ < −margin)` with the ideal point as the star.
pub fn btrm_likelihood(r_star: &[f64], q: &AnsweredQuery, cfg: &ResponseConfig) -> f64 {
    tau_moments(&star_embedding(r_star, cfg), &q.preferred, &q.rejected).prob_below(cfg.margin)
}

pub fn btrm_log_likelihood(r_star: &[f64], q: &AnsweredQuery, cfg: &ResponseConfig) -> f64 {
    tau_moments(&star_embedding(r_star, cfg), &q.preferred, &q.rejected).ln_prob_below(cfg.margin)
}

/// Likelihood of one answered query under the configured model.
pub fn likelihood(r_star: &[f64], q: &AnsweredQuery, cfg: &ResponseConfig) -> f64 {
    match cfg.kind {
        ResponseKind::Logistic => logistic_likelihood(r_star, q, cfg.k),
        ResponseKind::Btrm => btrm_likelihood(r_star, q, cfg),
    }
}

pub fn log_likelihood(r_star: &[f64], q: &AnsweredQuery, cfg: &ResponseConfig) -> f64 {
    match cfg.kind {
        ResponseKind::Logistic => logistic_log_likelihood(r_star, q, cfg.k),
        ResponseKind::Btrm => btrm_log_likelihood(r_star, q, cfg),
    }
}

fn draw(e: &GaussianEmbedding, d: usize, rng: &mut (impl Rng + ?Sized)) -> f64 {
    e.mu[d] + e.sigma[d] * standard_normal(rng)
}

fn sample_tau<R: Rng + ?Sized>(star: &GaussianEmbedding, p: &GaussianEmbedding, n: &GaussianEmbedding, rng: &mut R) -> f64 {
    (0..star.dim())
        .map(|d| {
            let s = draw(star, d, rng);
            let (pd, nd) = (draw(p, d, rng), draw(n, d, rng));
            (s - pd) * (s - pd) - (s - nd) * (s - nd)
        })
        .sum()
}

/// Empirical frequency of `τ < −margin` over `n_samples` independent draws.
pub fn mc_tau_probability<R: Rng + ?Sized>(
    star: &GaussianEmbedding,
    p: &GaussianEmbedding,
    n: &GaussianEmbedding,
    margin: f64,
    n_samples: usize,
    rng: &mut R,
) -> f64 {
    assert!(n_samples >= 1, "need at least one sample");
    let hits = (0..n_samples).filter(|_| sample_tau(star, p, n, rng) < -margin).count();
    hits as f64 / n_samples as f64
}

/// Sample mean and variance of τ with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSampleMoments {
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
}

pub fn mc_tau_moments<R: Rng + ?Sized>(
    star: &GaussianEmbedding,
    p: &GaussianEmbedding,
    n: &GaussianEmbedding,
    n_samples: usize,
    rng: &mut R,
) -> TauSampleMoments {
    assert!(n_samples >= 2, "need at least two samples");
    let samples: Vec<f64> = (0..n_samples).map(|_| sample_tau(star, p, n, rng)).collect();
    let count = n_samples as f64;
    let mean = samples.iter().sum::<f64>() / count;
    let central = |k: i32| samples.iter().map(|t| libm::pow(t - mean, k as f64)).sum::<f64>() / count;
    let variance = central(2) * count / (count - 1.0);
    let fourth = central(4);
    TauSampleMoments {
        mean,
        variance,
        mean_se: sqrt(variance / count),
        // Large-sample standard error of the sample variance.
        variance_se: sqrt(((fourth - variance * variance) / count).max(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_embedding<R: Rng>(dim: usize, rng: &mut R) -> GaussianEmbedding {
        GaussianEmbedding::new(
            (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..dim).map(|_| rng.random_range(0.05..1.5)).collect(),
        )
    }

    #[test]
    fn logistic_examples() {
        let q = AnsweredQuery::new(GaussianEmbedding::point(&[1.0, 0.0]), GaussianEmbedding::point(&[-1.0, 0.0]));
        assert_eq!(logistic_likelihood(&[0.0, 3.0], &q, 10.0), 0.5);
        // ‖r − μn‖² − ‖r − μp‖² = 2 at r = (0.5, 0): (1.5² − 0.5²) = 2.
        let p = logistic_likelihood(&[0.5, 0.0], &q, 1.0);
        assert!((p - 0.8807970779778823).abs() < 1e-12);
        let r = [0.3, -0.7];
        let sum = logistic_likelihood(&r, &q, 2.5) + logistic_likelihood(&r, &q.swapped(), 2.5);
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_candidates_give_even_odds() {
        let e = GaussianEmbedding::new(alloc::vec![0.4, -0.2], alloc::vec![0.3, 0.6]);
        let q = AnsweredQuery::new(e.clone(), e.clone());
        let m = tau_moments(&GaussianEmbedding::point(&[1.0, 1.0]), &e, &e);
        assert_eq!(m.mean, 0.0);
        assert_eq!(btrm_likelihood(&[1.0, 1.0], &q, &ResponseConfig::btrm()), 0.5);
    }

    #[test]
    fn deterministic_limit() {
        let s = GaussianEmbedding::point(&[0.5, -1.0, 2.0]);
        let p = GaussianEmbedding::point(&[0.0, 0.0, 1.0]);
        let n = GaussianEmbedding::point(&[1.0, 1.0, -1.0]);
        let m = tau_moments(&s, &p, &n);
        let expected = squared_distance(&s.mu, &p.mu) - squared_distance(&s.mu, &n.mu);
        assert!((m.mean - expected).abs() < 1e-12);
        assert_eq!(m.variance, 0.0);
        let q = AnsweredQuery::new(p, n);
        assert_eq!(btrm_likelihood(&s.mu, &q, &ResponseConfig::btrm()), if expected < 0.0 { 1.0 } else { 0.0 });
        let mut rng = stream(1, &[]);
        assert_eq!(mc_tau_probability(&s, &q.preferred, &q.rejected, 0.0, 100, &mut rng), 1.0);
    }

    #[test]
    fn moments_match_monte_carlo() {
        let mut rng = stream(21, &[]);
        for _ in 0..10 {
            let (s, p, n) = (random_embedding(6, &mut rng), random_embedding(6, &mut rng), random_embedding(6, &mut rng));
            let exact = tau_moments(&s, &p, &n);
            let mc = mc_tau_moments(&s, &p, &n, 200_000, &mut rng);
            assert!((exact.mean - mc.mean).abs() <= 4.0 * mc.mean_se, "{exact:?} {mc:?}");
            assert!((exact.variance - mc.variance).abs() <= 4.0 * mc.variance_se, "{exact:?} {mc:?}");
        }
    }

    #[test]
    fn btrm_probability_matches_monte_carlo() {
        let mut rng = stream(22, &[]);
        for _ in 0..10 {
            let (s, p, n) = (random_embedding(6, &mut rng), random_embedding(6, &mut rng), random_embedding(6, &mut rng));
            let closed = tau_moments(&s, &p, &n).prob_below(0.1);
            let mc = mc_tau_probability(&s, &p, &n, 0.1, 100_000, &mut rng);
            assert!((closed - mc).abs() <= 0.02, "closed {closed} mc {mc}");
        }
    }

    #[test]
    fn uncertainty_damps_toward_even_odds() {
        let q_sharp = AnsweredQuery::new(GaussianEmbedding::isotropic(&[1.0, 0.0], 0.1), GaussianEmbedding::isotropic(&[-1.0, 0.0], 0.1));
        let q_blurry = AnsweredQuery::new(GaussianEmbedding::isotropic(&[1.0, 0.0], 2.0), GaussianEmbedding::isotropic(&[-1.0, 0.0], 2.0));
        let cfg = ResponseConfig::btrm();
        let r = [0.8, 0.1];
        let sharp = btrm_likelihood(&r, &q_sharp, &cfg);
        let blurry = btrm_likelihood(&r, &q_blurry, &cfg);
        assert!(sharp > blurry && blurry > 0.5, "{sharp} {blurry}");
        let mut rng = stream(23, &[]);
        let star = GaussianEmbedding::point(&r);
        let mc_sharp = mc_tau_probability(&star, &q_sharp.preferred, &q_sharp.rejected, 0.0, 100_000, &mut rng);
        let mc_blurry = mc_tau_probability(&star, &q_blurry.preferred, &q_blurry.rejected, 0.0, 100_000, &mut rng);
        assert!(mc_sharp > mc_blurry && mc_blurry > 0.5);
    }

    #[test]
    fn choice_flip_and_translation_invariance() {
        let mut rng = stream(24, &[]);
        for _ in 0..50 {
            let (p, n) = (random_embedding(4, &mut rng), random_embedding(4, &mut rng));
            let r: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = AnsweredQuery::new(p.clone(), n.clone());
            for cfg in [ResponseConfig::logistic(), ResponseConfig { star_sigma: 0.3, ..ResponseConfig::btrm() }] {
                let flip = likelihood(&r, &q, &cfg) + likelihood(&r, &q.swapped(), &cfg);
                assert!((flip - 1.0).abs() < 1e-12);
                let shift = [0.7, -1.3, 2.0, 0.1];
                let moved = |e: &GaussianEmbedding| {
                    GaussianEmbedding::new(e.mu.iter().zip(shift).map(|(m, s)| m + s).collect(), e.sigma.clone())
                };
                let r2: Vec<f64> = r.iter().zip(shift).map(|(m, s)| m + s).collect();
                let q2 = AnsweredQuery::new(moved(&p), moved(&n));
                assert!((likelihood(&r, &q, &cfg) - likelihood(&r2, &q2, &cfg)).abs() < 1e-9);
                let l = likelihood(&r, &q, &cfg);
                assert!((0.0..=1.0).contains(&l));
                assert!((crate::math::log(l) - log_likelihood(&r, &q, &cfg)).abs() < 1e-9 || l < 1e-300);
            }
        }
    }

    #[test]
    fn moment_partials_match_finite_differences() {
        let mut rng = stream(25, &[]);
        let base = [random_embedding(3, &mut rng), random_embedding(3, &mut rng), random_embedding(3, &mut rng)];
        let (_, parts) = tau_moments_with_partials(&base[0], &base[1], &base[2]);
        let h = 1e-6;
        for role in 0..3 {
            for d in 0..3 {
                for wrt_sigma in [false, true] {
                    let eval = |delta: f64| {
                        let mut e = base.clone();
                        if wrt_sigma {
                            e[role].sigma[d] += delta;
                        } else {
                            e[role].mu[d] += delta;
                        }
                        tau_moments(&e[0], &e[1], &e[2])
                    };
                    let (up, down) = (eval(h), eval(-h));
                    let dm = (up.mean - down.mean) / (2.0 * h);
                    let dv = (up.variance - down.variance) / (2.0 * h);
                    let part = &parts[role];
                    let (am, av) = if wrt_sigma {
                        (part.mean_wrt_sigma[d], part.var_wrt_sigma[d])
                    } else {
                        (part.mean_wrt_mu[d], part.var_wrt_mu[d])
                    };
                    assert!((am - dm).abs() < 1e-6, "role {role} dim {d} sigma {wrt_sigma}: {am} vs {dm}");
                    assert!((av - dv).abs() < 1e-5 * (1.0 + dv.abs()), "role {role} dim {d} sigma {wrt_sigma}: {av} vs {dv}");
                }
            }
        }
    }
}
