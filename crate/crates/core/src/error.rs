use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A Cholesky factorization met a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ingestion error{}: {message}", row_suffix(*.row))]
    Ingest { row: Option<usize>, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("kernel `{kernel}` failed at iteration {iteration}: {source}")]
    Kernel {
        iteration: usize,
        kernel: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn row_suffix(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(" (row {r})"),
        None => String::new(),
    }
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn ingest(row: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Ingest {
            row,
            message: msg.into(),
        }
    }

    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::Domain(_) => "domain",
            Error::Dimension(_) => "dimension",
            Error::Ingest { .. } => "ingest",
            Error::Parse(_) => "parse",
            Error::Kernel { .. } => "mcmc",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
