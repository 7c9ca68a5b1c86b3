use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A query could not be parsed or does not fit the schema. `token` is the
    /// offending piece of input.
    #[error("invalid query near `{token}`: {message}")]
    Query { token: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("privacy budget exhausted: requested {requested}, remaining {remaining}")]
    BudgetExhausted { requested: f64, remaining: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("query is not covered by any materialized sigma-algebra")]
    NotCovered,

    #[error("sigma-algebra has no perturbed counts yet")]
    NotPerturbed,

    #[error("session horizon exceeded: step {step} > horizon {horizon}")]
    HorizonExceeded { step: u32, horizon: u32 },

    #[error("cell grid of {cells} cells exceeds the cap of {cap}")]
    CellCap { cells: u128, cap: u64 },

    #[error("division by zero: {0}")]
    ZeroDivisor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn query(token: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Query {
            token: token.into(),
            message: message.into(),
        }
    }
}
