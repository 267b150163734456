//! Experiment harness: synthetic datasets, training/evaluation pipelines,
//! the dense-vs-guided benchmark, ablation and sweep runners, and the CLI.

pub mod bench;
pub mod cli;
pub mod config;
pub mod csv;
pub mod error;
pub mod experiment;
pub mod images;

pub use config::Config;
pub use error::HarnessError;
