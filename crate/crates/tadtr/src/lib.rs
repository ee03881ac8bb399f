//! File formats, run configuration and the training/evaluation pipeline
//! around [`tadtr_core`]. The `tadtr` binary exposes these as subcommands.

pub mod annotations;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod pipeline;

pub use error::{Error, Result};
pub use tadtr_core;
