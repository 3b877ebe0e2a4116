//! Dense f64 tensors with reverse-mode differentiation.

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use param::{ParamTensor, Parameters};
pub use tape::{gelu_scalar, sigmoid_scalar, Gradients, Tape, Var};
