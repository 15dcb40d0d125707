//! Crate-wide error type.
//!
//! One enum covers all failure classes so that the CLI can map every error
//! to a process exit code in a single place (see [`Error::exit_code`]).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A record in an input file is malformed or a required field is missing.
    #[error("schema error in {path} (line {line}): {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    /// Duplicate ids or internally inconsistent corpus data.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A label string outside the accepted binary domain.
    #[error("label-domain error: {0}")]
    LabelDomain(String),

    /// Not enough data to perform the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Two paired sequences have mismatched lengths.
    #[error("arity error: left has {left} items, right has {right}")]
    Arity { left: usize, right: usize },

    /// Codebook is structurally invalid or an index points outside it.
    #[error("codebook error: {0}")]
    Codebook(String),

    /// A prompt decorator was applied to a spec that cannot accept it.
    #[error("decoration error: {0}")]
    Decoration(String),

    /// Backend returned a non-success status after retries were exhausted.
    #[error("backend error (status {status}): {body}")]
    Backend { status: u16, body: String },

    /// Backend payload did not match the expected wire format.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A batch run finished with some items failed; completed items are cached.
    #[error("partial failure: {} of {total} items failed (indices {failed:?})", failed.len())]
    PartialFailure {
        total: usize,
        failed: Vec<usize>,
        detail: String,
    },

    /// Training data cannot support scoring (e.g. only one class present).
    #[error("scoring-degenerate error: {0}")]
    ScoringDegenerate(String),

    /// The run configuration is inconsistent with the data or itself.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Prompt generation produced nothing usable.
    #[error("generation error: {0}")]
    Generation(String),

    /// In-prompt example ids overlap the scoring set.
    #[error("leakage error: {0}")]
    Leakage(String),

    /// Test-split discipline was violated.
    #[error("hold-out violation: {0}")]
    HoldOut(String),

    /// A stage was invoked before its dependencies exist.
    #[error("ordering error: {0}")]
    Ordering(String),

    /// A metric was requested on degenerate input (e.g. all-zero confusion matrix).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Every bootstrap resample was undefined for the requested metric.
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("http error: {0}")]
    Http(#[from] reqwest::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 validation, 2 execution, 3 hold-out.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::HoldOut(_) => 3,
            Error::Schema { .. }
            | Error::Integrity(_)
            | Error::LabelDomain(_)
            | Error::Codebook(_)
            | Error::Configuration(_)
            | Error::Toml(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
