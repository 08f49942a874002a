use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid {name}: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("singular volatility: sigma has rank {rank}, needs {n}")]
    SingularVolatility { rank: usize, n: usize },
    #[error("no stationary distribution: b[{index}] = 0")]
    NoStationaryDistribution { index: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },
    #[error("covariance is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPositiveSemidefinite { eigenvalue: f64 },
    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("volatility structure needs n >= 2, got {n}")]
    StructureTooSmall { n: usize },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: &'static str) -> Self {
        Error::InvalidParameter { name, reason }
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Dimension {
                what,
                expected,
                got,
            })
        }
    }
}
