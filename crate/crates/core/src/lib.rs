//! Preference-guided image synthesis over a learned relative-attribute space.
//!
//! The crate is split along the pipeline:
//!
//! * [`synthworld`] renders parametric stroke digits, measures their
//!   morphometrics and produces triplet supervision plus a synthetic oracle.
//! * [`nnet`] is a small dense-network substrate with analytic gradients and Adam.
//! * [`vae`] is the relative-attribute VAE and its three training objectives.
//! * [`response`] holds the logistic and Bayesian triplet response models.
//! * [`inference`] samples the ideal-point posterior given answered queries.
//! * [`session`] runs localization sessions and evaluates them, and
//!   [`experiment`] sweeps the ablation grid.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and the HTTP
//! service live in the companion `relquery` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod experiment;
pub mod inference;
pub mod math;
pub mod nnet;
pub mod response;
pub mod rng;
pub mod session;
pub mod synthworld;
pub mod vae;

pub use experiment::{Cell, ExperimentConfig, ModelKey};
pub use inference::{McmcConfig, PosteriorSamples};
pub use nnet::{DenseNet, Real};
pub use response::{AnsweredQuery, GaussianEmbedding, ResponseConfig, ResponseKind};
pub use session::{Localizer, Pool, SessionConfig, SessionState, Trajectory};
pub use synthworld::{Dataset, Image, Metadata, Standardizer, StrokeParams, Triplet};
pub use vae::{LatentSplit, Objective, TrainConfig, Vae};
