//! Batch driver behind the `mpc-dwr` binary: JSON configs in, CSV tables and
//! JSON summaries out.

pub mod config;
mod output;
mod run;

use std::io;
use std::path::PathBuf;

pub use config::{parse_config, Experiment, RunConfig};
pub use run::{run, workers_from_env, WORKERS_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error {0}")]
    Config(String),

    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },

    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Solver(#[from] mpc_dwr::Error),
}

impl CliError {
    /// 2 for solver nonconvergence, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Solver(e) if e.is_nonconvergence() => 2,
            _ => 1,
        }
    }
}
