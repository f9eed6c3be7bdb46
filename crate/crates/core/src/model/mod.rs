//! Forecaster assembly, batching and checkpoints.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod net;

pub use batch::Batch;
pub use checkpoint::Checkpoint;
pub use config::{CorrSpan, ModelConfig, Variant};
pub use net::{masked_mae, Forward, ForwardHooks, Model, ModelContext, GRID_KERNEL};
