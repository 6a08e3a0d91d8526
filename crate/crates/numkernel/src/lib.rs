//! Deterministic float64 tensor arithmetic with reverse-mode differentiation.
//!
//! * [`Tensor`]: row-major `f64` storage.
//! * [`Tape`] / [`Var`]: per-step computation record and its backward pass.
//! * [`gradcheck`]: central finite-difference verification.
//! * [`RngStream`]: splitmix64-seeded xoshiro256** streams.

mod error;
pub mod gradcheck;
pub mod rng;
mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, GradCheckReport};
pub use rng::{Distribution, RngStream};
pub use tape::{Gradients, Primitive, Tape, Var, COSINE_EPS, NORMALIZE_EPS};
pub use tensor::Tensor;
