//! File formats, ComVE ingestion, metrics and the `comve` command line
//! built on `comve-core`.

pub mod cli;
pub mod comve_csv;
pub mod config;
pub mod io;
pub mod metrics;
pub mod parallel;
