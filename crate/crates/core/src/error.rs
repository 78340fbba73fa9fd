use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at iteration {iteration}: non-finite parameter")]
    Divergence { iteration: usize },

    #[error("ensemble member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient trace: {got} post-burn-in iterates, need at least 2")]
    InsufficientTrace { got: usize },

    #[error("hyperparameter prior misconfigured: {0}")]
    PriorMisconfigured(String),

    #[error("one-shot moment propagation supports the regression head only")]
    UnsupportedHead,

    #[error("{path}: row {row}, column {col}: {msg}")]
    DataParse {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("{path}: row {row} has {got} columns, expected {expected}")]
    Ragged {
        path: PathBuf,
        row: usize,
        expected: usize,
        got: usize,
    },

    #[error("{0}: no data rows")]
    EmptyFile(PathBuf),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("posterior record: {0}")]
    PosteriorFormat(String),

    #[error("fold {fold}, method '{label}': {source}")]
    Cell {
        fold: usize,
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
