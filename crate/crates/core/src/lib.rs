// NaN-rejecting `!(x > 0.0)` guards and index loops over small fixed
// dimensions are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod bounded;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod exterior;
pub mod grid;
pub mod linalg;
pub mod operator;
pub mod propagator;
pub mod quadrature;
pub mod suites;
pub mod verify;
pub mod wholespace;

pub use error::{Error, Result};
