//! Fully binarized transformer toolkit: bit-packed kernels, binarized
//! attention, direction-matching distillation and the analysis experiments
//! around them.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod binarize;
pub mod bitcore;
pub mod distill;
pub mod error;
pub mod model;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
