use std::path::PathBuf;

use crate::linsolve::SolveStats;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-positive permittivity {value} at {location}")]
    NonPositivePermittivity { location: String, value: f64 },

    #[error("non-positive concentration {value} for species {species} at cell ({i}, {j})")]
    NonPositiveConcentration {
        species: usize,
        i: usize,
        j: usize,
        value: f64,
    },

    #[error("linear solver did not converge: {stats}")]
    NotConverged { stats: SolveStats },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("incompatible right-hand side: mean {mean:e} exceeds tolerance {tol:e}")]
    IncompatibleRhs { mean: f64, tol: f64 },

    #[error("net charge {total:e} exceeds tolerance {tol:e}; periodic Gauss sweep cannot close")]
    NetCharge { total: f64, tol: f64 },

    #[error("Gauss sweep left closure residual {residual:e} above tolerance {tol:e}")]
    SweepClosure { residual: f64, tol: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown example id {0}; expected 1, 2 or 3")]
    UnknownExample(u32),

    #[error("expression `{expr}`: {message}")]
    Expression { expr: String, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
