use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("task index {task} out of range (n_tasks = {n_tasks})")]
    TaskOutOfRange { task: usize, n_tasks: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid suite construction: {0}")]
    SuiteConstruction(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty batch for {0}")]
    EmptyBatch(&'static str),

    #[error("no stored transitions for task {task}")]
    NoDataForTask { task: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
