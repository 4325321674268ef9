//! Learned stochastic word-embedding perturbation (SWEP) for extractive
//! question answering.
//!
//! The crate trains a small transformer span-extraction model whose word
//! embeddings are multiplied by input-dependent Gaussian noise. The noise
//! distribution comes from a two-layer network over the encoder's hidden
//! states and is trained jointly with the QA model against a KL penalty
//! towards a fixed `N(1, alpha I)` prior.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod objectives;
pub mod optim;
pub mod qa_data;
pub mod rng;
pub mod trainer;

pub use error::{Result, SwepError};
