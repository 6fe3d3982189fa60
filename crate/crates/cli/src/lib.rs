//! Harness behind the `reflected-mfg` binary: configuration files, command
//! dispatch, run manifests and golden-file regression comparison. All the
//! numerics live in the library crate; this one only wires it to disk.

pub mod commands;
pub mod config;
pub mod golden;

pub use commands::{run_command, CliCommand, RunContext, RunManifest};
pub use config::RunConfig;
pub use golden::{golden_compare, GoldenReport};

/// Name of the environment variable that points the master field evaluator
/// at a persistent solve cache.
pub const CACHE_ENV_VAR: &str = "REFLECTED_MFG_CACHE";
