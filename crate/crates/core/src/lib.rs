#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod audio;
pub mod encoder;
pub mod heads;
pub mod nn;
pub mod pooling;
pub mod schedule;
pub mod model;
pub mod eval;
pub mod train;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
