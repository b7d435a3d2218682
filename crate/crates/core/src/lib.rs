// `!(x > 0.0)` is how the validators reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the tensor math they implement.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod embedeval;
mod error;
pub mod finetune;
pub mod io;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod preproc;
pub mod pretrain;
pub mod sampler;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Modality, Orientation, Volume};
