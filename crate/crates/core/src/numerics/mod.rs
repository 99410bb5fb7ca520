//! Dense tensors, the reverse-mode tape and finite-difference checking.

mod gradcheck;
pub mod memtrack;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::{cross_entropy, matmul, rms_norm, softmax_masked, MaskedSoftmax, RMS_EPS};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
