//! Adaptive sparse polynomial chaos expansions for black-box quantities of
//! interest, with moment/sensitivity/percentile extraction and a particle
//! swarm optimizer that consumes the fitted surrogate.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod basis;
pub mod doe;
pub mod error;
pub mod pso;
pub mod qoi;
pub mod solvers;
pub mod surrogate;

pub use error::{Error, Result};
