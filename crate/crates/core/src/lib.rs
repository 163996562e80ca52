//! Bottleneck iterative network for noisy audio-visual source separation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod data;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{BinModel, FusionState, ModelConfig, Rectifiers, Variant};
pub use tensor::{Gradients, Graph, Tensor, Var};
