//! Simulation laboratory for rescaled RMSprop/Adam dynamics and their
//! order-1 and order-2 stochastic modified equations.

// Negated comparisons reject NaN along with out-of-range values, and index
// loops mirror the componentwise formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod config;
pub mod continuous;
pub mod discrete;
pub mod error;
pub mod numerics;
pub mod problem;
pub mod simulate;

pub use error::{Error, Result};
