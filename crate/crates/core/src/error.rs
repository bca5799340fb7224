use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// An argument is outside the domain of the operation (negative bound,
    /// NaN input, violated parameter invariant).
    #[error("input domain: {0}")]
    InputDomain(String),

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A numerical step produced a non-finite value or a factorization failed.
    #[error("numerical failure: {reason}")]
    Numerical {
        reason: String,
        /// The state or matrix entries that triggered the failure, when available.
        offending: Option<Vec<f64>>,
        /// Rough condition estimate of the matrix that could not be factorized.
        condition: Option<f64>,
    },

    /// A stability certificate could not be established.
    #[error("certification failed: {0}")]
    Certification(String),

    /// A simulated trajectory broke a certified bound.
    #[error("bound violated at time {time}: |e| = {error_norm}, bound = {bound}")]
    BoundViolation {
        time: f64,
        error_norm: f64,
        bound: f64,
    },

    /// A metric was requested over an empty window or missing filter.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn numerical(reason: impl Into<String>) -> Self {
        Error::Numerical {
            reason: reason.into(),
            offending: None,
            condition: None,
        }
    }

    pub(crate) fn non_finite(reason: impl Into<String>, values: &[f64]) -> Self {
        Error::Numerical {
            reason: reason.into(),
            offending: Some(values.to_vec()),
            condition: None,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
