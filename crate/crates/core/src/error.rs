use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix that must be symmetric positive-definite could not be factored.
    #[error("{0} is not symmetric positive-definite")]
    NotPositiveDefinite(String),

    /// Raised only when a KMP system matrix fails to factor, which means the
    /// reference covariances or kernel assembly are broken.
    #[error("internal error: factorization of {0} failed")]
    Factorization(String),

    #[error("predicted covariance has eigenvalue {eigenvalue:e} below the rounding tolerance")]
    NegativeCovariance { eigenvalue: f64 },

    #[error("Riccati iteration did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// The state weight leaves a non-decaying mode of A unpenalized.
    #[error("(A, Q) is not detectable; unobserved subspace spanned by {basis:?}")]
    NotDetectable { basis: Vec<Vec<f64>> },

    #[error("closed loop is not stable (max eigenvalue magnitude/real part {0:e})")]
    Unstable(f64),

    #[error("no controller is confident: combined precision is singular")]
    NoConfidence,

    #[error("at time index {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }

    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NotPositiveDefinite(_)
            | Error::Factorization(_)
            | Error::NegativeCovariance { .. }
            | Error::NoConvergence { .. }
            | Error::NotDetectable { .. }
            | Error::Unstable(_)
            | Error::NoConfidence => true,
            Error::AtIndex { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
