#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ad;
pub mod bound;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod snr;
pub mod tensor;
pub mod train;

pub use ad::{Axis, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
