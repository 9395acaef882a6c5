//! Error types shared across the workspace.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum TanError {
    /// Malformed caller input (bad shapes, out-of-range indices, non-finite values).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Text-format parse failure with the offending line number (1-based).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Mathematical precondition violated (e.g. nonpositive diagonal).
    #[error("domain error: {0}")]
    Domain(String),

    /// GaBP numeric breakdown: an exclude-one precision went nonpositive,
    /// which signals a non-walk-summable precision matrix.
    #[error(
        "numeric breakdown at iteration {iteration}, edge ({}, {}): alpha = {alpha}",
        edge.0, edge.1
    )]
    NumericBreakdown {
        iteration: usize,
        edge: (usize, usize),
        alpha: f64,
    },

    /// Configuration inconsistency (bad hyperparameter, construction mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// Gradient-tape misuse (double backward, shape mismatch at record time).
    #[error("tape error: {0}")]
    Tape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TanError>;
