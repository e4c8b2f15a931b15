//! Dense tensors and a dynamic reverse-mode autodiff tape.
//!
//! Everything the three transformer variants need is here: linear maps,
//! batched matmuls for attention, softmax with causal masking, SiLU,
//! L2 and RMS normalization, rotary embeddings and the fused
//! cross-entropy loss. The tape is rebuilt for every step; nothing is
//! cached between forward passes.
//!
//! Two precisions are supported through [`Real`]: `f64` for the
//! finite-difference verification suites and `f32` for training runs.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_subset, GradcheckReport};
pub use real::{DType, Precision, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use real::{gemm, Layout};
