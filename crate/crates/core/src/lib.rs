//! Critic-free policy optimization on tabular softmax policies.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advantage;
pub mod calculus;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod numfmt;
pub mod objective;
pub mod policy;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use metrics::{MetricsFormat, MetricsRecord};
pub use policy::{Context, LogitTable, PolicyDistribution, Token, Vocab};
pub use trainer::{Algorithm, TrainConfig, Trainer};
