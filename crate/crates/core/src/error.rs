use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("measurement/operator mismatch: {0}")]
    OperatorMismatch(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("GMM training failed: {0}")]
    Training(String),

    #[error("reconstruction diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("malformed file at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("unsupported bit depth (maxval {0}); only 8-bit images are supported")]
    UnsupportedDepth(u32),

    #[error(transparent)]
    Io(#[from] io::Error),
}
