//! Progressive 1-bit weight quantization for small decoder-only language models.
//!
//! The crate covers the whole pipeline on a byte-level transformer: a tape
//! autodiff engine, the progressive binarizer with its analytic and learned
//! scales, temperature schedules, the init-scale search, chunked training,
//! bit-packed inference and a memory/cycle estimator.

mod error;

pub mod autodiff;
pub mod binquant;
pub mod checkpoint;
pub mod data;
pub mod efficiency;
pub mod init_search;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod packed;
pub mod scheduler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
