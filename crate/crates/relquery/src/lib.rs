//! File formats, the training and experiment pipeline, the CLI and the HTTP
//! session service around `relquery-core`.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod pipeline;
pub mod service;
