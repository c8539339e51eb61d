//! Minimal neural-network runtime: parameter storage, a reverse-mode tape,
//! losses and the AdamW optimizer.

pub mod loss;
mod optim;
mod params;
mod tape;
mod train;

pub use optim::{AdamW, CosineSchedule};
pub(crate) use params::normal_mat;
pub use params::{Grads, Mat, ParamEntry, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use train::{train_step, CLIP_NORM};
