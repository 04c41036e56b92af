//! Command-line front end: config parsing, CSV ingestion, analysis and
//! simulation entry points, and result serialization.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod output;

pub use config::RunConfig;
