//! Dense 2-D tensors, a reverse-mode tape over them, and a finite-difference
//! gradient auditor.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, BlockAudit, GradAuditReport, Objective};
pub use tape::{Fault, Gradients, NodeId, Tape, BCE_CLAMP};
pub use tensor::{
    activation, layer_norm, matmul, sigmoid, softmax_rows, softmax_slice, Activation, Tensor2,
};

pub(crate) use tape::bce_value;
