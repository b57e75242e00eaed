//! Differentiable numeric engine: dense tensors, the operators the model zoo
//! needs, tape-based reverse-mode gradients and the Adam update.

mod adam;
mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{
    clamp_prob, BatchNormConfig, Gradients, Mode, Padding, RunningStats, Tape, Var, PROB_FLOOR,
};
pub use tensor::Tensor;
