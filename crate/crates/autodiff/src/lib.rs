//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! the handful of ops a small conv + attention classifier needs.

mod checkpoint;
mod error;
mod gemm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry};
pub use error::{Error, Result};
pub use optim::{adamw_update, AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{BatchNormState, Mode, Tape, Var, SELU_ALPHA, SELU_SCALE};
pub use tensor::Tensor;
