//! Error type shared by every estimator in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate key: firm {firm} year {year}")]
    DuplicateKey { firm: String, year: i32 },

    #[error("missing field `{field}` for firm {firm} year {year}")]
    MissingField { field: String, firm: String, year: i32 },

    #[error("no usable observations: {0}")]
    NoUsableObservations(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("not identified: {0}")]
    NotIdentified(String),

    #[error("no start converged: {0}")]
    NotConverged(String),

    #[error("only {got} successful bootstrap replications, need at least {needed}")]
    Bootstrap { got: usize, needed: usize },

    #[error("likelihood total {total} outside [90, 110]; response discarded")]
    DiscardedResponse { total: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
