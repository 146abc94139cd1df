//! Reverse-mode automatic differentiation for the convolutional networks in
//! `vaeinfo-core`.
//!
//! Everything is `f64` and single threaded, so a forward pass is a pure
//! function of its inputs and results are bitwise reproducible.

mod array;
mod kernels;
mod tape;

pub use array::Array;
pub use kernels::ConvGeom;
pub use tape::{BnMode, BnStats, Grads, Tape, Var, BN_EPS};
