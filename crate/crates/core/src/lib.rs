#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod advdiff;
pub mod baselines;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod field;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod pod;
pub mod rng;

pub use error::{Error, Result};
