//! File formats, a parallel study runner and the `sparsefactor` command
//! line on top of [`sparsefactor_core`].

pub mod cli;
pub mod error;
pub mod format;
pub mod io;
pub mod study;

pub use error::{CliError, CliResult};
pub use sparsefactor_core as core;
