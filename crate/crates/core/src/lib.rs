// Validation uses `!(x > 0.0)` and friends so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pretrain;
mod seed;
pub mod sigproc;
pub mod tokenization;

pub use error::{Error, Result};
pub use seed::derive_seed;
