//! Mixed-precision bit allocation for small transformers: calibration, scale
//! folding, group quantization, a soft actor-critic allocator, exhaustive
//! search baselines and GGUF export.

pub(crate) mod binio;
pub mod calibrate;
pub mod config;
pub mod error;
pub mod ggufx;
pub mod nnkit;
pub mod oracles;
pub mod pipeline;
pub mod quantcore;
pub mod rlenv;
pub mod rng;
pub mod sacagent;
pub mod scalefold;
pub mod tensor;
pub mod tinylm;

pub use error::{Error, Result};
