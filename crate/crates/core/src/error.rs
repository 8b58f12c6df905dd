//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A theta ratio was evaluated too close to a zero of its denominator.
    #[error("evaluation within pole guard: |theta| = {value:.3e} at guarded site {site}")]
    PoleProximity { site: String, value: f64 },

    /// An element's quasi-periodicity tag does not match the requested space.
    #[error("tag mismatch: element carries {found}, operation needs {expected}")]
    TagMismatch { expected: String, found: String },

    /// A coefficient expression referenced a variable the config never declared.
    #[error("undeclared variable {0}")]
    UndeclaredVariable(String),

    /// The rewriting engine hit its depth bound.
    #[error("normal ordering exceeded {bound} rewrites; offending word {word}")]
    DepthExceeded { bound: usize, word: String },

    /// An exchange was requested on a pair the relations do not cover.
    #[error("malformed index pattern: {0}")]
    MalformedPattern(String),

    /// Exchange position out of range.
    #[error("positions {0}, {1} are not adjacent in a word of length {2}")]
    NonAdjacent(usize, usize, usize),

    /// A sequence failed validation (entries must be >= 2, nonempty).
    #[error("invalid sequence: {0}")]
    InvalidSeq(String),

    /// Grade cap exceeded in a product or bracket.
    #[error("grade {0} exceeds the supported cap {1}")]
    GradeCap(u32, u32),

    /// Verification suite name not registered.
    #[error("unknown suite {0}")]
    UnknownSuite(String),

    /// Degenerate numeric input (Im eta <= 0, tol <= 0, ...).
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}
