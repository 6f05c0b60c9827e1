//! Storage formats, training runs, reconstruction, evaluation and attention
//! benchmarks on top of `flowdit-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod run;

pub use error::{Error, Result};
