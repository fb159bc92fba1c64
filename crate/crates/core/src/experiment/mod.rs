//! Config-driven experiment runs.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{ExperimentKind, RunConfig, OUTPUT_DIR_ENV};
pub use output::{write_atomic, Verdict, Verdicts};
pub use runner::{run, RunReport};
