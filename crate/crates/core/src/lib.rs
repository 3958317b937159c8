//! Target-speaker separation: signal processing, a small autodiff engine, a
//! speaker embedder, the attention-based mask estimator and the training and
//! evaluation pipeline around them.

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod speaker;
pub mod tensor;
pub mod wav;

pub use error::{Error, Result};
