use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at iteration {iteration} (last good state: {checkpoint:?})")]
    Diverged {
        iteration: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("grid would need {required} bytes, cap is {cap} bytes")]
    GridMemory { required: u64, cap: u64 },

    #[error("time step {dt} violates the CFL bound (max admissible dt = {max_dt})")]
    Cfl { dt: f64, max_dt: f64 },

    #[error("could only place {placed} of {requested} agents with the requested separation")]
    Packing { placed: usize, requested: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Numerical(_) | Error::Diverged { .. } => "numerical",
            Error::CheckpointVersion { .. }
            | Error::CheckpointCorrupt(_)
            | Error::CheckpointShape(_) => "checkpoint",
            Error::GridMemory { .. } | Error::Cfl { .. } => "grid",
            Error::Packing { .. } => "scenario",
            Error::Config(_) => "config",
            Error::MissingArtifact(_) => "dependency",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }
}
