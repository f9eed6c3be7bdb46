//! Differentiable tensor engine: values, reverse-mode record, parameters and Adam.

pub(crate) mod gemm;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod serial;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use nn::{Activation, Affine, Fcn2};
pub use params::{xavier_uniform, Adam, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
