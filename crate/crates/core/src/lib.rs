//! Mini-transformer laboratory for studying attention sinks.
//!
//! The crate is organised bottom-up: [`tensor`] provides dense numerics and a
//! reverse-mode tape, [`positional`] and [`attention`] implement the
//! architectural variants, [`model`] assembles the decoder stack, [`data`]
//! builds training chunks, [`train`] runs optimization and [`analysis`]
//! measures sinks and checks closed-form oracles.

pub mod analysis;
pub mod attention;
pub mod data;
pub mod error;
pub mod model;
pub mod positional;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
