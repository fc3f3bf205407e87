//! File formats, configuration and the experiment runner behind the
//! `cyclic-dp` command.

pub mod checkpoint;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod fsutil;
pub mod report;
pub mod runner;

pub use error::{CliError, Result};
