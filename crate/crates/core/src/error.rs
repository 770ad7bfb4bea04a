use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate covariance (norm {norm:e}){}", sample_suffix(.sample))]
    DegenerateCovariance { sample: Option<usize>, norm: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("{op} did not converge after {sweeps} sweeps")]
    NoConvergence { op: &'static str, sweeps: usize },
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
}

fn sample_suffix(sample: &Option<usize>) -> String {
    match sample {
        Some(id) => alloc::format!(" at sample {id}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    /// Attaches a sample id to a degenerate-covariance error.
    pub fn with_sample(self, id: usize) -> Self {
        match self {
            Error::DegenerateCovariance { norm, .. } => Error::DegenerateCovariance { sample: Some(id), norm },
            other => other,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
