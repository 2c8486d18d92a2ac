//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into every node that requires them. The engine is generic over
//! [`Real`] so the same model code runs in 32-bit for training and 64-bit
//! for finite-difference checking ([`grad_check`]).

mod backward;
mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use gradcheck::{grad_check, GradCheckReport};
pub use real::Real;
pub use tape::{CustomBackward, Tape, Var, MASK_NEG};
pub use tensor::Tensor;

pub(crate) use real::gemm;

#[cfg(test)]
mod tests;
