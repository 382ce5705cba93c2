//! Reverse-mode automatic differentiation over the operations used by the
//! attention layers and models.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_tensors, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId};
