//! Config-driven experiments: verification suites, training runs, seed
//! sweeps and the motivating error table.

pub mod config;
pub mod motivate;
pub mod run;
pub mod verify;

pub use config::{EvalConfig, ExperimentConfig, Overrides};
pub use run::{cmd_run, cmd_sweep, RunSummary};
pub use verify::{run_verify, Suite, VerifyOptions, VerifyReport};

use crate::error::Error;

/// Process exit statuses of the command-line front end.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const VERIFY_FAILED: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const IO: i32 = 5;
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => exit::CONFIG,
        Error::Diverged { .. } => exit::DIVERGED,
        Error::Io(_) => exit::IO,
        _ => exit::OTHER,
    }
}
