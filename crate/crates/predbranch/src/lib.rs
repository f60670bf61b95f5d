//! Long-tailed relation classification with similarity-branched heads and
//! memory-based knowledge transfer.
//!
//! The library implements a full desk-scale experiment pipeline:
//!
//! 1. [`synthdata`] generates deterministic synthetic relation datasets with a
//!    power-law class distribution and planted class-similarity structure.
//! 2. [`baseline`] trains the conventional all-class linear predictor
//!    `softmax(W_e e + W_u u + z)` and collects per-class statistics.
//! 3. [`clustering`] groups class indices by agglomerative clustering of the
//!    baseline's average predicted distributions.
//! 4. [`transfer`] holds the knowledge-transfer machinery: trainable class
//!    memories, coefficient projectors, attention gating, scale calibration,
//!    and the margin-based memory loss.
//! 5. [`branching`] assembles the branched predictor (a root group classifier
//!    plus one fine-grained classifier per group), its routing rules, and its
//!    losses.
//! 6. [`trainer`] runs two-phase SGD training with a linear warmup schedule
//!    and serializes checkpoints.
//! 7. [`evalreport`] computes recall@K / mean recall@K with per-frequency-group
//!    summaries and drives the four-way ablation grid.
//!
//! Everything is built on [`numerics`], a minimal dense f64 layer with
//! hand-written gradients and a central finite-difference checking harness.
//! All randomness flows from a single 64-bit seed; identical inputs produce
//! byte-identical output files.
//!
//! The `predbranch` binary exposes the pipeline as subcommands (`gen-data`,
//! `pretrain`, `cluster`, `train`, `eval`, `ablate`, `grad-check`); the
//! `examples/` directory holds one runnable program per capability.

pub mod baseline;
pub mod branching;
pub mod cli;
pub mod clustering;
mod error;
pub mod evalreport;
pub mod gradsuite;
pub(crate) mod jsonfmt;
pub mod numerics;
pub(crate) mod rng;
pub mod synthdata;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
