//! Experiment driver: staged, content-addressed runs over a synthetic
//! multi-task suite.

pub mod config;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod manifest;
pub mod pipeline;

pub use error::{BenchError, Result};
