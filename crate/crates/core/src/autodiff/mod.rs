//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records operations as they are evaluated; [`Tape::backward`]
//! walks the record in reverse to produce gradients for every trainable leaf.

mod check;
mod tape;

pub use check::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
