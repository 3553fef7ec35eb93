//! File formats, run directories, experiment runners and the command-line
//! front end for `emofuse-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod formats;
pub mod rundir;
pub mod runs;

pub use error::{Error, Result};
