//! Configuration, experiment drivers and file output for the `cellmech`
//! command-line tool.
//!
//! - [`config`]: INI run configuration
//! - [`commands`]: single runs, parameter sweeps, sensitivity analysis and
//!   the convergence benchmark
//! - [`output`]: legacy VTK snapshots and CSV tables

pub mod commands;
pub mod config;
pub mod output;

pub use commands::CliError;
pub use config::RunConfig;
