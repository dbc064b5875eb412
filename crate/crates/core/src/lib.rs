//! Differential geometry of Riemannian Lie algebroids.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod algebroid;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod killing;
pub mod model;
pub mod report;
pub mod riemann;
pub mod sampling;
pub mod sigma;
pub mod tensor;

pub use error::{Error, Result};
