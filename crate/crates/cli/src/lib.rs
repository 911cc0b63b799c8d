//! Command-line driver for the `hegnn-core` library: trace and expressivity
//! tables, the perturbation sweep, the self-check suite and N-body training.
//!
//! Every command writes CSV with a header row and a trailing
//! `# version=... seed=... tolerances=...` line. Rows come out in a fixed
//! order, so a rerun with the same flags writes identical bytes.

pub mod cli;
pub mod commands;
mod error;
pub mod nbody;
pub mod parse;
pub mod table;
pub mod verify;

pub use cli::{execute, run_from, Cli};
pub use error::{CliError, CliResult, EXIT_FAILED, EXIT_USAGE};
