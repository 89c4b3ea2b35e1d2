//! Dense arrays and reverse-mode differentiation for small MLPs.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{finite_diff_gradient, relative_error, GradCheckReport};
pub use graph::{
    kl_logits, log_softmax, sigmoid, sign, softmax, softplus, Activation, Gradients, Graph, NodeId,
};
pub use real::{Precision, Real};
pub use tensor::Tensor;
