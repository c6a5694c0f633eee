//! Library side of the `fastfit` binary, so tests can drive the commands
//! without a subprocess.

pub mod commands;
pub mod config;
pub mod verify;

pub use config::RunConfig;

/// Exit status for a failed command: `3` for numeric faults, `2` otherwise.
pub fn exit_code(err: &fastfit_core::Error) -> i32 {
    use fastfit_core::Error::*;
    match err {
        NonFinite { .. } | Divergence { .. } | DegenerateRow { .. } => 3,
        _ => 2,
    }
}
