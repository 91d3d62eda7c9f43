//! Library half of the `esolm` command: configuration, commands and bias dumps.

pub mod commands;
pub mod config;
pub mod inspect;

use esolm_core::Error as CoreError;

use commands::CheckpointMismatch;
use config::ConfigError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

/// Exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if cause.is::<CheckpointMismatch>() {
            return EXIT_CHECKPOINT;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Divergence { .. } => EXIT_DIVERGENCE,
                CoreError::Checkpoint(_) | CoreError::CheckpointVersion { .. } => EXIT_CHECKPOINT,
                CoreError::Config(_) | CoreError::OrderingConstraint { .. } => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}
