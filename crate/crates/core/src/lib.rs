//! Binary point-cloud transformer engine: bit-packed xnor/popcount linear
//! algebra, 1-bit weight/activation binarization with straight-through
//! training, point-cloud transformer twins, metric learning for place
//! recognition, and the evaluation / cost-model toolkit.

pub mod autodiff;
pub mod binarize;
pub mod bitops;
pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod learning;
pub mod model;
pub mod params;
pub mod pointops;

pub use error::{Error, Result};
