//! File formats, configuration and the command-line driver for `gfmn-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod images;
pub mod runlog;

pub use error::{IoError, Result};
