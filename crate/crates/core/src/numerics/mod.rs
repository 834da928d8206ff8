//! Deterministic dense tensors and the handful of layers and losses the
//! relation model needs, each with an analytic backward pass.
//!
//! Forward passes that feed a backward return a tape by value; the matching
//! backward consumes it, so a tape can be differentiated at most once.

pub mod gradcheck;
mod layers;
mod loss;
mod tensor;

use thiserror::Error;

pub use layers::{
    activation, batchnorm, fan_in_uniform_matrix, linear_forward, Activation, ActivationTape,
    BatchNorm, BatchNormGrad, BatchNormTape, BatchStats, Linear, LinearGrad, LinearTape, NormMode,
    BATCHNORM_EPSILON, BATCHNORM_MOMENTUM,
};
pub use loss::{
    cross_entropy, cross_entropy_logit_grad, kl_divergence, kl_student_logit_grad, softmax_rows,
    softmax_temp, LossValue, PROBABILITY_FLOOR,
};
pub use tensor::{argmax, Tensor2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}
