//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append a node
//! holding their output value and, when any input needs a gradient, a
//! backward closure. [`Tape::backward`] sweeps the nodes in reverse and
//! returns the gradients of every `requires_grad` leaf.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{Backward, BackwardContext, Gradients, Tape, Var};
