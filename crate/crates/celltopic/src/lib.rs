//! File formats, checkpoints and the command line front end for
//! `celltopic-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod io;
pub mod report;

pub use error::{CliError, Result};
