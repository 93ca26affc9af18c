//! Goal-oriented space-time adaptivity for parabolic optimal control problems
//! and its use inside a receding-horizon (MPC) loop.
//!
//! The discretization is dG(0) in time and cG(1) in space on a 1D interval,
//! with an independent mesh per time slab.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod dwr;
pub mod error;
pub mod fem;
pub mod grid;
pub mod model;
pub mod mpc;
pub mod solver;
pub mod trajectory;
pub mod tridiag;

pub use error::{Error, Result};
