use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {message} (rows: {rows:?})")]
    Validation { message: String, rows: Vec<usize> },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("imputation error: {0}")]
    Imputation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter outside its domain: {0}")]
    Domain(String),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("{label}: no convergence after {iterations} iterations (residual norm {residual_norm:.3e})")]
    NonConvergence {
        label: String,
        iterations: usize,
        residual_norm: f64,
        best: Vec<f64>,
    },

    #[error("{label}: singular matrix ({detail})")]
    Singular { label: String, detail: String },

    #[error("{label}: perfect separation detected")]
    Separation { label: String },

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("{estimator}: {source}")]
    Estimator {
        estimator: String,
        #[source]
        source: Box<Error>,
    },

    #[error("bootstrap unstable: {failed} of {total} replicates failed")]
    UnstableBootstrap { failed: usize, total: usize },

    #[error("data-generating process produced probability {value} outside [0,1] ({what})")]
    DgpIntegrity { what: String, value: f64 },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_)
            | Error::Schema(_)
            | Error::Validation { .. }
            | Error::DegenerateData(_)
            | Error::Imputation(_) => ErrorKind::Data,
            Error::Config(_) => ErrorKind::Usage,
            Error::Estimator { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    pub(crate) fn in_estimator(self, estimator: &str) -> Error {
        match self {
            e @ Error::Estimator { .. } => e,
            e => Error::Estimator {
                estimator: estimator.to_string(),
                source: Box::new(e),
            },
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
