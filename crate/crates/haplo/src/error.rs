use thiserror::Error;

/// Crate-wide error type. `exit_code` maps onto the CLI contract:
/// 2 argument, 3 config, 4 sequencing, 5 divergence, 6 format/I/O.
#[derive(Debug, Error)]
pub enum HaploError {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("calibration error: missing token types {0:?}")]
    Calibration(Vec<String>),

    #[error("gradient oracle failure: {0}")]
    OracleFailure(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
}

impl HaploError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HaploError::Argument(_) => 2,
            HaploError::Config(_) => 3,
            HaploError::Sequencing(_) => 4,
            HaploError::Divergence { .. } => 5,
            HaploError::Format(_) | HaploError::Io(_) => 6,
            HaploError::Calibration(_)
            | HaploError::OracleFailure(_)
            | HaploError::DegenerateBatch(_) => 2,
        }
    }
}
