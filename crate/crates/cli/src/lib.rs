//! Config-driven experiments on top of `ssm-core`: dataset generation,
//! training, filtered forecasting and long free rollouts.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_generate, cmd_inspect, cmd_rollout, cmd_train, load_norm_stats, EvalArgs,
    TrainArtifacts, CHECKPOINT_FILE, CONFIG_FILE, DATASET_FILE, HISTORY_FILE,
};
pub use config::ExperimentConfig;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, file contents or incompatible inputs.
    #[error("{0}")]
    Usage(String),
    /// Training or inference produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

/// Thread count from `SSM_THREADS`, falling back to `flag`.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    match std::env::var("SSM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::Usage(format!("SSM_THREADS must be a positive integer, got {v:?}"))
            }),
        Err(_) => Ok(flag),
    }
}
