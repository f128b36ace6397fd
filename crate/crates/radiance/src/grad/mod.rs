//! Reverse-mode gradients over flat parameter buffers, Adam optimization and
//! finite-difference verification.
//!
//! There is no general tape: each operation in the crate (dense layers,
//! trilinear lookups, SH decoding, the rendering quadrature, the losses) ships
//! its own hand-derived backward pass that accumulates into the gradient
//! buffer paired with the parameters.

mod adam;
mod check;
mod store;

pub use adam::{adam_step, lr_schedule, AdamState};
pub use check::{grad_check, GradCheckReport};
pub use store::{backward, ParamStore, Segment};
