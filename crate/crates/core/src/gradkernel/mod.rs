//! Dense `f64` primitives with hand-written backward rules, plus a
//! central-difference gradient checker.

mod check;
mod ops;
mod tensor;

pub use check::{
    check_gradient, check_gradient_with, relative_error, relative_error_floor, Evaluation, GradCheckReport,
    DEFAULT_FLOOR,
};
pub use ops::{
    affine, affine_backward, axpy, dot, l2_norm, relu, relu_backward, softmax, softmax_backward,
};
pub use tensor::{ParamId, ParamSet, Shape, Tensor};
