//! Minimal reverse-mode autodiff engine and optimizer.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use tape::{Activation, Tape, Var, LEAKY_RELU_SLOPE};
pub use tensor::Tensor;
