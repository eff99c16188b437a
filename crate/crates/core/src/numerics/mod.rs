//! Dense tensors, a reverse-mode tape and the AdamW optimizer.

pub mod kernels;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use scalar::{DType, Scalar};
pub use tape::{AttentionLayout, AttentionOutput, Gradients, Tape, Var};
pub use tensor::Tensor;
