//! Dense tensors, reverse-mode differentiation and the gradient auditor.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradReport, ParamAudit};
pub use graph::{Grads, Graph, Mode, Var};
pub use params::{is_buffer_name, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
