//! `fcluster` command line: runs the clustering pipeline stage by stage or
//! end to end, reports review precision and serves the review API.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod server;

pub use config::PipelineConfig;
pub use error::{AppError, Result, Stage};
