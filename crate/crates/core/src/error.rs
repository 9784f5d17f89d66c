use thiserror::Error;

#[derive(Debug, Error)]
pub enum KmpError {
    /// An input lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tabular input could not be parsed; `row` is 1-based and counts the header.
    #[error("data error at row {row}, column '{column}': {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl KmpError {
    /// Short machine-readable tag, used by the CLI's JSON error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            KmpError::Domain(_) => "domain",
            KmpError::Config(_) => "config",
            KmpError::Data { .. } => "data",
            KmpError::Numerical(_) => "numerical",
            KmpError::Io(_) => "io",
            KmpError::Csv(_) => "csv",
            KmpError::Json(_) => "json",
        }
    }
}

pub type Result<T, E = KmpError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> KmpError {
    KmpError::Config(msg.into())
}

pub(crate) fn domain_err(msg: impl Into<String>) -> KmpError {
    KmpError::Domain(msg.into())
}
