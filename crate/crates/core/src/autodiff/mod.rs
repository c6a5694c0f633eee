//! Reverse-mode differentiation over the numkernel operation set.

mod gradcheck;
mod tape;

pub use gradcheck::{relative_error, FiniteDiff, GradReport, ParamCheck};
pub use tape::{Gradients, NodeId, Primitive, Tape};
