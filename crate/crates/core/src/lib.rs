//! Structured concept-graph reasoning for long-horizon policies at desk scale.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod numerics;
pub mod seed;

pub mod distill;
pub mod encoder;
pub mod graph;
pub mod projector;
pub mod sim;

pub mod cli;
pub mod gradsuite;

pub use error::{Error, Result};
