// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multistage adaptive sampling for locating a jump discontinuity in a
//! parametric regression function, with the compound Poisson limit-law
//! machinery used to size sampling windows and build confidence intervals.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cpp_limit;
pub mod design;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod intervals;
pub mod model;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
