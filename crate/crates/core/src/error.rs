use thiserror::Error;

/// Errors raised by the estimation, prediction and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("degenerate smoothing window at ({x:.6}, {y:.6})")]
    DegenerateWindow { x: f64, y: f64 },

    #[error("no off-diagonal raw covariances available (every surface has fewer than two observed cells)")]
    InsufficientPairs,

    #[error("trace of the temporal kernel is not positive ({0:e})")]
    NonPositiveTrace(f64),

    #[error("zero denominator in partial inner product")]
    ZeroDenominator,

    #[error("option price {price} outside the no-arbitrage bracket ({lower}, {upper})")]
    PriceOutOfBracket { price: f64, lower: f64, upper: f64 },

    #[error("linear system is numerically singular (condition estimate {0:e}); increase the ridge")]
    SingularSystem(f64),

    #[error("factorization of the correlation matrix failed after jitter escalation")]
    FactorizationFailure,

    #[error("covariance is not positive semi-definite (smallest eigenvalue {0:e})")]
    NonPsdCovariance(f64),

    #[error("all bandwidth candidates produced degenerate fits")]
    AllCandidatesDegenerate,

    #[error("surface has no observations")]
    EmptySurface,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateWindow { .. }
                | Error::NonPositiveTrace(_)
                | Error::ZeroDenominator
                | Error::SingularSystem(_)
                | Error::FactorizationFailure
                | Error::NonPsdCovariance(_)
                | Error::AllCandidatesDegenerate
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
