//! File formats, configuration, lambda sweeps and the command-line runner
//! around `modfuse-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;
pub mod sweep;

pub use error::{Error, Result};
