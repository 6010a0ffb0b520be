//! Bias-restrained prefix representation finetuning on a desk-scale
//! character transformer, with the numerical-probe diagnostics that go with
//! it.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod eval;
pub mod intervention;
pub mod io;
pub mod model;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod probe;
pub mod pid;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use intervention::{Edit, InterventionParams, InterventionScope, PositionMask, ScopeKind};
pub use model::{BaseWeights, GradientSet, ModelConfig, Trainable};
pub use pid::{PidController, PidGains, PidState};
