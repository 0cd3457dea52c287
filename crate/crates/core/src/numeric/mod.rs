//! Dense linear algebra, differentiable primitives, the Adam optimizer and a
//! finite-difference gradient checker. Everything is `f64`.

mod adam;
mod gradcheck;
mod linear;
mod matrix;
mod ops;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub(crate) use linear::join_name;
pub use linear::{LinearLayer, ParamRef, Parameterized};
pub use matrix::{Matrix, Tensor3};
pub use ops::{
    binary_cross_entropy, binary_cross_entropy_grad, clamp_prob, positive_cross_entropy,
    positive_cross_entropy_grad, sigmoid, softmax, PROB_MAX, PROB_MIN,
};
pub(crate) use ops::{softmax_backward, softmax_in_place};
