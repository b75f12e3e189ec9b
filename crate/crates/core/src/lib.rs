//! Numerical laboratory for linearized mean field game systems: weighted
//! (Carleman-type) estimate verification, inverse source reconstruction from
//! boundary and mid-time slice data, and state determination from lateral
//! boundary data.

// Validation compares with `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod ensemble;
pub mod error;
pub mod estimate;
pub mod expr;
pub mod grid;
pub mod harness;
pub mod inverse;
pub mod lsq;
pub mod norm;
pub mod state;
pub mod stencil;
pub mod system;
pub mod weight;

pub use error::{Error, Result};
