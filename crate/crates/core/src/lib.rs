//! Transformer risk classification for irregularly sampled, heterogeneous
//! patient event sequences.
//!
//! The pipeline: [`ingest`] parses and vectorizes cohorts, [`embedder`]
//! projects event features and encodes time gaps, [`encoder`] runs masked
//! multi-head self-attention, [`head`] pools over time and scores risk.
//! [`trainer`] fits the model with Adam on a recorded tape ([`numcore`]) and
//! audits its gradients; [`experiments`] runs the comparison and sensitivity
//! sweeps exposed by the `clinrisk` binary.

pub mod cli;
pub mod datagen;
pub mod embedder;
pub mod encoder;
mod error;
pub mod experiments;
pub mod head;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use error::{Error, ParseErrorKind, Result};
pub use model::{ModelConfig, ModelParams};
