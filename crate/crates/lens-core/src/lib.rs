//! Latent-query CTR models with target-conditioned query routing.
//!
//! The crate is organised around a small dense-tensor autodiff core and
//! builds up from there:
//!
//! - [`tape`], [`tensor`], [`params`]: row-major f64 tensors, a reverse-mode
//!   operation tape, named parameter storage, and a finite-difference
//!   gradient checker.
//! - [`embed`]: embedding tables, typed action fusion, masked sequence mean,
//!   and the full-side feature vector.
//! - [`posbias`]: static position mechanisms for cross-attention (global
//!   curve, absolute embeddings, query-specific bias) with right-aligned
//!   indexing.
//! - [`lens`]: the target-conditioned query gate (TCQG) and target-conditioned
//!   position bias (TCPB), the density-driven condition-source rule, and
//!   parameter-cost accounting.
//! - [`backbone`]: the latent-query decoder (QueryGen, cross-attention with
//!   additive bias providers, query boosting, capacity switches, MLP head).
//! - [`din`]: a target-attention baseline over raw history items.
//! - [`synth`] / [`data`]: a synthetic exposure-log generator with planted
//!   click mechanisms, plus dataset file I/O.
//! - [`metrics`], [`adam`], [`train`], [`ablation`]: AUC/logloss, the Adam
//!   optimiser, the training loop with checkpointing, and the staged
//!   ablation grid runner.

pub mod ablation;
pub mod adam;
pub mod attn_bench;
pub mod backbone;
pub mod config;
pub mod data;
pub mod din;
pub mod embed;
pub mod error;
pub mod export;
pub mod lens;
pub mod metrics;
pub mod params;
pub mod posbias;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{DatasetSpec, DinConfig, ModelConfig, RunConfig, TrainConfig};
pub use error::{CoreError, Result};
pub use params::{grad_check, BoundParams, ParameterStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
