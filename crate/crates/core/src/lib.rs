//! Bayesian evidence by Laplace approximation at ray-discovered modes.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod density;
pub mod discovery;
pub mod error;
pub mod laplace;
pub mod lbfgs;
pub mod linalg;
pub mod pipeline;
pub mod precheck;
pub mod quad;
pub mod reduce;
pub mod refine;

pub use error::{Error, Result, Stage};
