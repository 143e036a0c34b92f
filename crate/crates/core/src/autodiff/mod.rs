//! Dense-matrix reverse-mode automatic differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Values live on the tape and
//! are addressed through copyable [`Var`] handles; parameters are registered
//! as gradient-carrying leaves and read back after [`Tape::backward`].

mod tape;
mod tensor;

pub(crate) use tape::check_ascending;
pub use tape::{softmax_values, Tape, Var};
pub use tensor::Tensor;
