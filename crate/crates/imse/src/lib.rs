//! Audio I/O, file formats and the command line for the `imse` enhancer.
//! The numerics live in `imse-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod resample;
pub mod wav;

pub use error::{CliError, Result};
