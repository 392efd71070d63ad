// SPDX-License-Identifier: MIT OR Apache-2.0

//! Library half of the `lenslab` command-line tool: configuration,
//! atomic output, the cached surprisal units and every subcommand.

pub mod commands;
pub mod config;
pub mod io;
pub mod report;
pub mod toy;
pub mod workspace;

/// A problem with the run configuration or command line (exit code 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_DATA_ERROR: i32 = 1;
pub const EXIT_CONFIG_ERROR: i32 = 2;

/// Exit status for a failed command: configuration problems map to 2,
/// everything else (bad data, numeric failures, I/O) to 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        EXIT_CONFIG_ERROR
    } else {
        EXIT_DATA_ERROR
    }
}
