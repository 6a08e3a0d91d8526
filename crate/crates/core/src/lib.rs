//! Budgeted cross-scale observation on synthetic paired LR/HR scenes.
//!
//! A lightweight sampler scores HR tiles from the LR overview, a policy picks
//! which tiles to observe, a cross-attention predictor completes the dense
//! latent grid from the sparse HR evidence plus LR context, and an alignment
//! head maps the pooled result into a concept embedding space for retrieval
//! and zero-shot recognition.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod sampler;
pub mod scene;

pub use error::{CxsError, Result};
