//! Configuration, orchestration and reporting for fine-tuning experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;
pub mod svg;

pub use config::{ConfigError, ExperimentConfig};
pub use run::{OracleBreach, Overrides, RunManifest};

/// Process exit code for an error: 2 for configuration problems, 4 for
/// oracle breaches, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else if err.chain().any(|e| e.is::<OracleBreach>()) {
        4
    } else {
        3
    }
}
