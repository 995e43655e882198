//! Files, reports and the command line around `m2a-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod io;
pub mod report;

pub use config::RunConfig;
pub use error::CliError;
