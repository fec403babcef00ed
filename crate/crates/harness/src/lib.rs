//! Configuration, replicate orchestration and CSV output for `slfv-core`
//! experiments.

pub mod commands;
pub mod config;
pub mod output;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad configuration or input files; nothing was run.
    #[error("{0}")]
    Validation(String),
    /// Failure while running (numerical fault, I/O).
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 1,
            HarnessError::Runtime(_) => 2,
        }
    }
}
