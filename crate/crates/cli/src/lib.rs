//! Batch front-end for `equidecomp`: TOML run configs, CSV ingestion and
//! JSON/text reports.

pub mod config;
pub mod error;
pub mod ingest;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use error::{exit, CliError, CliResult};
pub use ingest::{ingest_csv, IngestReport, IngestSpec};
