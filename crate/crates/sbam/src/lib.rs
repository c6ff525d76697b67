//! Salience-driven masking for masked image modeling.
//!
//! Token salience is the min-max-normalized outgoing attention weight of each
//! token (column sums of the row-softmaxed affinity matrix). The masking
//! strategies built on it hide the most salient tokens, optionally with a
//! per-sample adaptive ratio derived from how many tokens clear a salience
//! threshold. A tiny masked autoencoder with hand-written backprop and a
//! sweep/metrics layer make the strategies comparable end to end at desk
//! scale. The `sbam` binary exposes all of it.

pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod masking;
pub mod metrics;
pub mod mimloss;
pub mod numerics;
pub mod salience;
pub mod synth;
pub mod tensorio;
pub mod tokenize;
pub mod trainer;

pub use error::{Error, Result};
