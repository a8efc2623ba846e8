use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MipsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MipsError {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, unknown version or element type, inconsistent header fields.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter or longer than the header promises.
    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },

    /// Non-finite values or otherwise unusable data.
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The input admits no meaningful answer (all-zero dataset and the like).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("calibration failed: target speedup {target} not reachable; achievable range [{min:.3}, {max:.3}]")]
    Calibration { target: f64, min: f64, max: f64 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl MipsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MipsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        MipsError::Argument(msg.into())
    }
}
