//! Localized visual question answering.
//!
//! A question about an image region is answered by computing multi-glimpse
//! attention over the whole feature map, masking the attention-weighted
//! features to the region, and classifying the pooled vector together with
//! the question embedding. The crate also provides the four region-encoding
//! baselines, a synthetic dataset generator, the training loop and metrics.

pub mod attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
