pub mod attention;
pub mod autodiff;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
