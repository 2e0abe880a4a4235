//! Relative-attribute VAE.
//!
//! The encoder maps a 784-pixel image to a diagonal Gaussian over the latent
//! code `(r, z)`; the decoder maps a latent code back to pixels through a
//! sigmoid. Training minimizes per-pixel MSE plus a β-weighted KL to the
//! standard normal plus a β-weighted triplet term on the `r` block:
//!
//! * `Unsupervised`: no triplet term.
//! * `Traditional`: hinge triplet loss on the encoded means.
//! * `Bayesian`: negative log of the Gaussian-approximated probability that
//!   the triplet holds, with the anchor embedding in the ideal-point role.
//!
//! Encoder output layout is `[μ_r, μ_z, logvar_r, logvar_z]`.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{exp, ln_normal_cdf, log, sqrt};
use crate::nnet::{Activation, AdamConfig, AdamState, DenseNet, GradientSet, NnetError, Real};
use crate::response::{tau_moments, tau_moments_with_partials, GaussianEmbedding};
use crate::rng::{standard_normal, stream};
use crate::synthworld::{Dataset, Image, Triplet, IMAGE_PIXELS};

pub const ENCODER_HIDDEN: [usize; 2] = [256, 64];
pub const DECODER_HIDDEN: [usize; 2] = [64, 256];
/// Floor on the triplet-satisfaction probability inside the Bayesian loss.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VaeError {
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("objective {0:?} needs a non-empty triplet list")]
    NoTriplets(Objective),
    #[error("dataset has no training items")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Net(#[from] NnetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSplit {
    pub r_dim: usize,
    pub z_dim: usize,
}

impl Default for LatentSplit {
    fn default() -> Self {
        LatentSplit { r_dim: 6, z_dim: 0 }
    }
}

impl LatentSplit {
    pub fn latent_dim(&self) -> usize {
        self.r_dim + self.z_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Unsupervised,
    Traditional,
    Bayesian,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Bayesian, Objective::Traditional, Objective::Unsupervised];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Unsupervised => "unsupervised",
            Objective::Traditional => "traditional",
            Objective::Bayesian => "bayesian",
        }
    }

    pub fn uses_triplets(self) -> bool {
        self != Objective::Unsupervised
    }
}

impl core::str::FromStr for Objective {
    type Err = VaeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unsupervised" => Ok(Objective::Unsupervised),
            "traditional" => Ok(Objective::Traditional),
            "bayesian" => Ok(Objective::Bayesian),
            _ => Err(VaeError::InvalidConfig("unknown objective")),
        }
    }
}

/// How the squared reconstruction error is reduced over pixels in the
/// training objective. Evaluation always reports the per-pixel mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconReduction {
    /// Sum over pixels: the Gaussian log-likelihood of the ELBO up to constants.
    PixelSum,
    /// Mean over pixels.
    PixelMean,
}

/// How the KL term is reduced over latent dimensions in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReduction {
    DimSum,
    DimMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Triplets per optimizer step, drawn with replacement.
    pub triplet_batch_size: usize,
    pub kl_beta: f64,
    pub triplet_beta: f64,
    pub triplet_margin: f64,
    pub objective: Objective,
    /// Both terms default to means. With the KL summed against a per-pixel
    /// reconstruction mean, kl_beta = 0.01 is strong enough to collapse the
    /// unsupervised posterior onto the prior.
    pub reconstruction: ReconReduction,
    pub kl_reduction: KlReduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 256,
            triplet_batch_size: 128,
            kl_beta: 0.01,
            triplet_beta: 0.1,
            triplet_margin: 0.1,
            objective: Objective::Bayesian,
            reconstruction: ReconReduction::PixelMean,
            kl_reduction: KlReduction::DimMean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        if !(self.learning_rate > 0.0) {
            return Err(VaeError::InvalidConfig("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.triplet_batch_size == 0 {
            return Err(VaeError::InvalidConfig("epochs and batch sizes must be positive"));
        }
        if !(self.kl_beta >= 0.0 && self.triplet_beta >= 0.0 && self.triplet_margin >= 0.0) {
            return Err(VaeError::InvalidConfig("betas and margin must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae<T> {
    pub split: LatentSplit,
    pub encoder: DenseNet<T>,
    pub decoder: DenseNet<T>,
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub r: GaussianEmbedding,
    pub z: GaussianEmbedding,
}

impl<T: Real> Vae<T> {
    pub fn new<R: Rng + ?Sized>(split: LatentSplit, rng: &mut R) -> Self {
        let l = split.latent_dim();
        let encoder = DenseNet::new(
            &[IMAGE_PIXELS, ENCODER_HIDDEN[0], ENCODER_HIDDEN[1], 2 * l],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        );
        let decoder = DenseNet::new(
            &[l, DECODER_HIDDEN[0], DECODER_HIDDEN[1], IMAGE_PIXELS],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            rng,
        );
        Vae { split, encoder, decoder }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn params_flat(&self) -> Vec<T> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<(), VaeError> {
        let ne = self.encoder.param_count();
        if flat.len() != self.param_count() {
            return Err(VaeError::Dimension { expected: self.param_count(), got: flat.len() });
        }
        self.encoder.set_params_flat(&flat[..ne])?;
        self.decoder.set_params_flat(&flat[ne..])?;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Vae<U> {
        Vae { split: self.split, encoder: self.encoder.cast(), decoder: self.decoder.cast() }
    }

    /// Encodes a row-major batch of images.
    pub fn encode_batch(&self, pixels: &[f64]) -> Result<Vec<Encoded>, VaeError> {
        if pixels.is_empty() || pixels.len() % IMAGE_PIXELS != 0 {
            return Err(VaeError::Dimension { expected: IMAGE_PIXELS, got: pixels.len() });
        }
        let input: Vec<T> = pixels.iter().map(|&v| T::lit(v)).collect();
        let out = self.encoder.predict(&input)?;
        let (r, l) = (self.split.r_dim, self.split.latent_dim());
        Ok(out
            .chunks_exact(2 * l)
            .map(|row| {
                let mu: Vec<f64> = row[..l].iter().map(|v| v.as_f64()).collect();
                let sigma: Vec<f64> = row[l..].iter().map(|v| exp(0.5 * v.as_f64()).max(f64::MIN_POSITIVE)).collect();
                Encoded {
                    r: GaussianEmbedding::new(mu[..r].to_vec(), sigma[..r].to_vec()),
                    z: GaussianEmbedding::new(mu[r..].to_vec(), sigma[r..].to_vec()),
                }
            })
            .collect())
    }

    /// Relative-attribute embedding of one image.
    pub fn encode(&self, img: &Image) -> GaussianEmbedding {
        self.encode_batch(img.pixels()).expect("an image has the encoder's input size").remove(0).r
    }

    /// Encodes many images, `chunk` at a time.
    pub fn encode_images<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Vec<Encoded> {
        let mut out = Vec::new();
        let mut buf = Vec::with_capacity(512 * IMAGE_PIXELS);
        let flush = |buf: &mut Vec<f64>, out: &mut Vec<Encoded>| {
            if !buf.is_empty() {
                out.extend(self.encode_batch(buf).expect("whole images"));
                buf.clear();
            }
        };
        for img in images {
            buf.extend_from_slice(img.pixels());
            if buf.len() == 512 * IMAGE_PIXELS {
                flush(&mut buf, &mut out);
            }
        }
        flush(&mut buf, &mut out);
        out
    }

    /// Decodes a batch of latent codes, each `latent_dim` long.
    pub fn decode_batch(&self, latent: &[f64]) -> Result<Vec<Image>, VaeError> {
        let l = self.split.latent_dim();
        if latent.is_empty() || latent.len() % l != 0 {
            return Err(VaeError::Dimension { expected: l, got: latent.len() });
        }
        let input: Vec<T> = latent.iter().map(|&v| T::lit(v)).collect();
        let out = self.decoder.predict(&input)?;
        Ok(out
            .chunks_exact(IMAGE_PIXELS)
            .map(|row| Image::from_clamped(row.iter().map(|v| v.as_f64())).expect("decoder emits 784 pixels"))
            .collect())
    }

    pub fn decode(&self, r: &[f64], z: &[f64]) -> Result<Image, VaeError> {
        if r.len() != self.split.r_dim {
            return Err(VaeError::Dimension { expected: self.split.r_dim, got: r.len() });
        }
        if z.len() != self.split.z_dim {
            return Err(VaeError::Dimension { expected: self.split.z_dim, got: z.len() });
        }
        let mut latent = r.to_vec();
        latent.extend_from_slice(z);
        Ok(self.decode_batch(&latent)?.remove(0))
    }
}

/// `μ + σ ⊙ ε` with one standard-normal draw per dimension.
pub fn reparameterize<R: Rng + ?Sized>(e: &GaussianEmbedding, rng: &mut R) -> Vec<f64> {
    e.mu.iter().zip(&e.sigma).map(|(m, s)| m + s * standard_normal(rng)).collect()
}

/// KL divergence from `N(μ, σ²)` to the standard normal, summed over dimensions.
pub fn kl_term(e: &GaussianEmbedding) -> f64 {
    e.mu.iter()
        .zip(&e.sigma)
        .map(|(m, s)| 0.5 * (s * s + m * m - 1.0 - 2.0 * log(*s)))
        .sum()
}

/// `max(0, ‖a − p‖² − ‖a − n‖² + margin)`.
pub fn traditional_triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    use crate::math::squared_distance as d2;
    (d2(a, p) - d2(a, n) + margin).max(0.0)
}

/// Gradient of a scalar with respect to one Gaussian embedding.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingGrad {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `−ln max(P(τ < −margin), 1e-12)` with the anchor in the ideal-point role.
pub fn bayesian_triplet_nll(a: &GaussianEmbedding, p: &GaussianEmbedding, n: &GaussianEmbedding, margin: f64) -> f64 {
    let m = tau_moments(a, p, n);
    let sd = m.std();
    let ln_p = if sd > 0.0 { ln_normal_cdf((-margin - m.mean) / sd) } else { log(m.prob_below(margin)) };
    -ln_p.max(log(PROBABILITY_FLOOR))
}

/// [`bayesian_triplet_nll`] with gradients for anchor, positive and negative.
pub fn bayesian_triplet_nll_grad(
    a: &GaussianEmbedding,
    p: &GaussianEmbedding,
    n: &GaussianEmbedding,
    margin: f64,
) -> (f64, [EmbeddingGrad; 3]) {
    let (m, parts) = tau_moments_with_partials(a, p, n);
    let sd = m.std();
    let zero = || EmbeddingGrad { mu: alloc::vec![0.0; a.dim()], sigma: alloc::vec![0.0; a.dim()] };
    if !(sd > 0.0) {
        return (bayesian_triplet_nll(a, p, n, margin), [zero(), zero(), zero()]);
    }
    let z = (-margin - m.mean) / sd;
    let ln_phi_cdf = ln_normal_cdf(z);
    if ln_phi_cdf < log(PROBABILITY_FLOOR) {
        return (-log(PROBABILITY_FLOOR), [zero(), zero(), zero()]);
    }
    // d(−ln Φ(z))/dz = −φ(z)/Φ(z)
    let dz = -exp(-0.5 * z * z - LN_SQRT_2PI - ln_phi_cdf);
    let d_mean = dz * (-1.0 / sd);
    let d_var = dz * (-z / sd) / (2.0 * sd);
    let grads = parts.map(|pt| EmbeddingGrad {
        mu: pt.mean_wrt_mu.iter().zip(&pt.var_wrt_mu).map(|(gm, gv)| d_mean * gm + d_var * gv).collect(),
        sigma: pt.mean_wrt_sigma.iter().zip(&pt.var_wrt_sigma).map(|(gm, gv)| d_mean * gm + d_var * gv).collect(),
    });
    (-ln_phi_cdf, grads)
}

/// Loss components of one objective evaluation, each a batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub kl: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradients<T> {
    pub encoder: GradientSet<T>,
    pub decoder: GradientSet<T>,
}

impl<T: Real> VaeGradients<T> {
    /// Same order as [`Vae::params_flat`].
    pub fn flat(&self) -> Vec<T> {
        let mut g = self.encoder.flat();
        g.extend(self.decoder.flat());
        g
    }
}

/// Evaluates the training objective and its gradient.
///
/// `images` is a row-major batch. `triplet_images`, when given, stacks all
/// anchors, then all positives, then all negatives. The reparameterization
/// noise is drawn from `rng`.
pub fn vae_objective<T: Real, R: Rng + ?Sized>(
    vae: &Vae<T>,
    images: &[T],
    triplet_images: Option<&[T]>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossParts, VaeGradients<T>), VaeError> {
    objective(vae, images, triplet_images, cfg, rng, None)
}

/// [`vae_objective`] plus the piecewise-linear region it was evaluated in:
/// every ReLU unit's on/off state and every active hinge. Gradient checks use
/// it to skip finite differences that straddle a kink.
pub fn vae_objective_region<T: Real, R: Rng + ?Sized>(
    vae: &Vae<T>,
    images: &[T],
    triplet_images: Option<&[T]>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossParts, Vec<bool>), VaeError> {
    let mut region = Vec::new();
    let (parts, _) = objective(vae, images, triplet_images, cfg, rng, Some(&mut region))?;
    Ok((parts, region))
}

fn objective<T: Real, R: Rng + ?Sized>(
    vae: &Vae<T>,
    images: &[T],
    triplet_images: Option<&[T]>,
    cfg: &TrainConfig,
    rng: &mut R,
    mut region: Option<&mut Vec<bool>>,
) -> Result<(LossParts, VaeGradients<T>), VaeError> {
    if images.is_empty() || images.len() % IMAGE_PIXELS != 0 {
        return Err(VaeError::Dimension { expected: IMAGE_PIXELS, got: images.len() });
    }
    let batch = images.len() / IMAGE_PIXELS;
    let l = vae.split.latent_dim();
    let mut grads = VaeGradients { encoder: GradientSet::zeros_like(&vae.encoder), decoder: GradientSet::zeros_like(&vae.decoder) };

    let (enc_out, enc_cache) = vae.encoder.forward(images)?;
    let mut eps = alloc::vec![0.0f64; batch * l];
    let mut latent = Vec::with_capacity(batch * l);
    for (b, row) in enc_out.chunks_exact(2 * l).enumerate() {
        for d in 0..l {
            let e = standard_normal(rng);
            eps[b * l + d] = e;
            let sigma = exp(0.5 * row[l + d].as_f64());
            latent.push(T::lit(row[d].as_f64() + sigma * e));
        }
    }
    let (recon_out, dec_cache) = vae.decoder.forward(&latent)?;
    if let Some(out) = region.as_deref_mut() {
        vae.encoder.relu_pattern(&enc_cache, out);
        vae.decoder.relu_pattern(&dec_cache, out);
    }
    let scale = match cfg.reconstruction {
        ReconReduction::PixelSum => 1.0 / batch as f64,
        ReconReduction::PixelMean => 1.0 / (batch * IMAGE_PIXELS) as f64,
    };
    let mut recon = 0.0;
    let recon_grad: Vec<T> = recon_out
        .iter()
        .zip(images)
        .map(|(&y, &x)| {
            let diff = (y - x).as_f64();
            recon += diff * diff;
            T::lit(2.0 * diff * scale)
        })
        .collect();
    recon *= scale;
    let latent_grad = vae
        .decoder
        .backward_into(&dec_cache, &recon_grad, &mut grads.decoder, true)?
        .expect("input gradient requested");

    let mut kl = 0.0;
    let mut enc_grad = alloc::vec![T::zero(); batch * 2 * l];
    let inv_b = match cfg.kl_reduction {
        KlReduction::DimSum => 1.0 / batch as f64,
        KlReduction::DimMean => 1.0 / (batch * l) as f64,
    };
    for (b, row) in enc_out.chunks_exact(2 * l).enumerate() {
        for d in 0..l {
            let mu = row[d].as_f64();
            let logvar = row[l + d].as_f64();
            let var = exp(logvar);
            kl += 0.5 * (var + mu * mu - 1.0 - logvar);
            let g_latent = latent_grad[b * l + d].as_f64();
            enc_grad[b * 2 * l + d] = T::lit(g_latent + cfg.kl_beta * mu * inv_b);
            enc_grad[b * 2 * l + l + d] =
                T::lit(g_latent * eps[b * l + d] * 0.5 * sqrt(var) + cfg.kl_beta * 0.5 * (var - 1.0) * inv_b);
        }
    }
    kl *= inv_b;
    vae.encoder.backward_into(&enc_cache, &enc_grad, &mut grads.encoder, false)?;

    let mut triplet = 0.0;
    if let (true, Some(trip)) = (cfg.objective.uses_triplets(), triplet_images) {
        if trip.is_empty() || trip.len() % (3 * IMAGE_PIXELS) != 0 {
            return Err(VaeError::Dimension { expected: 3 * IMAGE_PIXELS, got: trip.len() });
        }
        let count = trip.len() / (3 * IMAGE_PIXELS);
        let (t_out, t_cache) = vae.encoder.forward(trip)?;
        if let Some(out) = region.as_deref_mut() {
            vae.encoder.relu_pattern(&t_cache, out);
        }
        let mut t_grad = alloc::vec![T::zero(); t_out.len()];
        let weight = cfg.triplet_beta / count as f64;
        let r = vae.split.r_dim;
        let row = |role: usize, i: usize| (role * count + i) * 2 * l;
        for i in 0..count {
            let emb = |role: usize| {
                let base = row(role, i);
                GaussianEmbedding::new(
                    (0..r).map(|d| t_out[base + d].as_f64()).collect(),
                    (0..r).map(|d| exp(0.5 * t_out[base + l + d].as_f64())).collect(),
                )
            };
            let (a, p, n) = (emb(0), emb(1), emb(2));
            match cfg.objective {
                Objective::Traditional => {
                    let loss = traditional_triplet_loss(&a.mu, &p.mu, &n.mu, cfg.triplet_margin);
                    triplet += loss;
                    if let Some(out) = region.as_deref_mut() {
                        out.push(loss > 0.0);
                    }
                    if loss > 0.0 {
                        for d in 0..r {
                            let g = [2.0 * (n.mu[d] - p.mu[d]), -2.0 * (a.mu[d] - p.mu[d]), 2.0 * (a.mu[d] - n.mu[d])];
                            for (role, gv) in g.iter().enumerate() {
                                t_grad[row(role, i) + d] = T::lit(weight * gv);
                            }
                        }
                    }
                }
                Objective::Bayesian => {
                    let (loss, g) = bayesian_triplet_nll_grad(&a, &p, &n, cfg.triplet_margin);
                    triplet += loss;
                    let sigmas = [&a.sigma, &p.sigma, &n.sigma];
                    for (role, eg) in g.iter().enumerate() {
                        for d in 0..r {
                            t_grad[row(role, i) + d] = T::lit(weight * eg.mu[d]);
                            // dσ/dlogvar = σ/2
                            t_grad[row(role, i) + l + d] = T::lit(weight * eg.sigma[d] * 0.5 * sigmas[role][d]);
                        }
                    }
                }
                Objective::Unsupervised => unreachable!(),
            }
        }
        triplet /= count as f64;
        vae.encoder.backward_into(&t_cache, &t_grad, &mut grads.encoder, false)?;
    }

    let total = recon + cfg.kl_beta * kl + cfg.triplet_beta * triplet;
    Ok((LossParts { recon, kl, triplet, total }, grads))
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub triplet: f64,
    pub total: f64,
}

fn gather<T: Real>(dataset: &Dataset, ids: impl Iterator<Item = usize>, out: &mut Vec<T>) {
    out.clear();
    for i in ids {
        out.extend(dataset.items[i].image.pixels().iter().map(|&v| T::lit(v)));
    }
}

/// Trains a fresh model on the training split.
pub fn train<T: Real>(
    dataset: &Dataset,
    triplets: &[Triplet],
    split: LatentSplit,
    cfg: &TrainConfig,
) -> Result<(Vae<T>, Vec<EpochMetrics>), VaeError> {
    train_with_progress(dataset, triplets, split, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress<T: Real>(
    dataset: &Dataset,
    triplets: &[Triplet],
    split: LatentSplit,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<(Vae<T>, Vec<EpochMetrics>), VaeError> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    if cfg.objective.uses_triplets() && triplets.is_empty() {
        return Err(VaeError::NoTriplets(cfg.objective));
    }
    let mut vae = Vae::<T>::new(split, &mut stream(cfg.seed, &[1]));
    let adam_cfg = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let mut enc_adam = AdamState::new(&vae.encoder, adam_cfg);
    let mut dec_adam = AdamState::new(&vae.decoder, adam_cfg);
    let mut order_rng = stream(cfg.seed, &[2]);
    let mut noise_rng = stream(cfg.seed, &[3]);
    let mut triplet_rng = stream(cfg.seed, &[4]);
    let mut order = dataset.train.clone();
    let mut batch_buf: Vec<T> = Vec::new();
    let mut trip_buf: Vec<T> = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = LossParts::default();
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            gather(dataset, chunk.iter().copied(), &mut batch_buf);
            let trip = if cfg.objective.uses_triplets() {
                let picked: Vec<Triplet> =
                    (0..cfg.triplet_batch_size).map(|_| triplets[triplet_rng.random_range(0..triplets.len())]).collect();
                let ids = picked
                    .iter()
                    .map(|t| t.anchor)
                    .chain(picked.iter().map(|t| t.positive))
                    .chain(picked.iter().map(|t| t.negative));
                gather(dataset, ids, &mut trip_buf);
                Some(trip_buf.as_slice())
            } else {
                None
            };
            let (parts, grads) = vae_objective(&vae, &batch_buf, trip, cfg, &mut noise_rng)?;
            enc_adam.apply(&mut vae.encoder, &grads.encoder)?;
            dec_adam.apply(&mut vae.decoder, &grads.decoder)?;
            sums.recon += parts.recon;
            sums.kl += parts.kl;
            sums.triplet += parts.triplet;
            sums.total += parts.total;
            steps += 1;
        }
        let s = steps as f64;
        let m = EpochMetrics { epoch, recon: sums.recon / s, kl: sums.kl / s, triplet: sums.triplet / s, total: sums.total / s };
        progress(&m);
        history.push(m);
    }
    Ok((vae, history))
}

/// Percentage of triplets with `‖μa − μp‖² < ‖μa − μn‖²` under the encoder means.
pub fn eval_triplet_satisfaction<T: Real>(vae: &Vae<T>, dataset: &Dataset, triplets: &[Triplet]) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let mut needed: Vec<usize> = triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]).collect();
    needed.sort_unstable();
    needed.dedup();
    let encoded = vae.encode_images(needed.iter().map(|&i| &dataset.items[i].image));
    let mu = |item: usize| &encoded[needed.binary_search(&item).expect("encoded")].r.mu;
    let satisfied = triplets.iter().filter(|t| embedding_satisfies(mu(t.anchor), mu(t.positive), mu(t.negative))).count();
    100.0 * satisfied as f64 / triplets.len() as f64
}

/// Strict triplet ordering; ties count as unsatisfied.
pub fn embedding_satisfies(a: &[f64], p: &[f64], n: &[f64]) -> bool {
    crate::math::squared_distance(a, p) < crate::math::squared_distance(a, n)
}

/// Mean per-pixel MSE of reconstructions decoded from the encoder means.
pub fn eval_reconstruction<'a, T: Real>(vae: &Vae<T>, images: impl IntoIterator<Item = &'a Image>) -> f64 {
    let images: Vec<&Image> = images.into_iter().collect();
    if images.is_empty() {
        return 0.0;
    }
    let encoded = vae.encode_images(images.iter().copied());
    let latent: Vec<f64> = encoded.iter().flat_map(|e| e.r.mu.iter().chain(&e.z.mu).copied()).collect();
    let decoded = vae.decode_batch(&latent).expect("latent sized by the split");
    decoded.iter().zip(&images).map(|(d, x)| d.mse(x)).sum::<f64>() / images.len() as f64
}

/// Mean encoder σ over the `r` block.
pub fn mean_encoder_sigma<'a, T: Real>(vae: &Vae<T>, images: impl IntoIterator<Item = &'a Image>) -> f64 {
    let encoded = vae.encode_images(images);
    let count = encoded.len() * vae.split.r_dim;
    encoded.iter().flat_map(|e| e.r.sigma.iter()).sum::<f64>() / count.max(1) as f64
}
