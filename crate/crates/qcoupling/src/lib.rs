//! File formats, the parallel Monte Carlo driver and the command-line
//! front end for `qcoupling-core`.

pub mod cli;
pub mod error;
pub mod formats;
pub mod mc;
pub mod output;

pub use error::{CliError, Result};
