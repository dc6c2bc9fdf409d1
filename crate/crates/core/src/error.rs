use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto its exit-code
/// contract: configuration/validation problems exit 1, runtime and
/// numerical failures exit 2, artifact integrity/compatibility exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("infeasible skew: {0}")]
    InfeasibleSkew(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("restriction violation: {0}")]
    RestrictionViolation(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("incompatible format version: found {found}, supported {supported}")]
    Incompatible { found: u32, supported: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::InfeasibleSkew(_)
            | Error::RestrictionViolation(_)
            | Error::Resolution(_) => 1,
            Error::UndefinedMetric(_)
            | Error::Estimation(_)
            | Error::Numerical(_)
            | Error::Io(_) => 2,
            Error::Integrity(_) | Error::Incompatible { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
