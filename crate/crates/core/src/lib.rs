#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod cli;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod sampling;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};

/// Value of the top-level "version" field of every JSON report.
pub const REPORT_VERSION: u32 = 1;
