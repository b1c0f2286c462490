//! Synthetic detection data, training, VOC metrics and the experiment runners
//! behind the `cstf` command line tool.

pub mod cli;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod matchtask;
pub mod metrics;
pub mod plot;
pub mod report;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
