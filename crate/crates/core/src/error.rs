use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum LrnsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("column {column} is numerically dependent on the preceding columns (residual {residual:e}, column norm {norm:e})")]
    RankDeficient { column: usize, residual: f64, norm: f64 },

    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} exceeds {tolerance:e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("matrix is not positive definite: pivot {pivot:e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("requested {requested} eigenpairs but only {available} positive eigenvalues are available")]
    InsufficientSpectrum { requested: usize, available: usize },

    #[error("nonpositive diffusion coefficient in sample(s) {samples:?} (minimum {min:e})")]
    EllipticityViolated { samples: Vec<usize>, min: f64 },

    #[error("direct solve failed for sample {sample} at step {step}: {source}")]
    SampleSolve {
        sample: usize,
        step: usize,
        #[source]
        source: Box<LrnsError>,
    },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("line search failed after {trials} trials at iteration {iteration}")]
    LineSearch { iteration: usize, trials: usize },

    #[error("{0}")]
    Format(String),

    /// An error located at a configuration field, e.g. `diffusion.sigma`.
    #[error("{path}: {error}")]
    Field { path: String, error: Box<LrnsError> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LrnsError>;

impl LrnsError {
    /// Prefixes the field path with `prefix`. Parameter errors contribute
    /// their own name as the last path segment.
    pub fn at(self, prefix: &str) -> Self {
        match self {
            Self::Field { path, error } => Self::Field {
                path: format!("{prefix}.{path}"),
                error,
            },
            Self::InvalidParameter { name, reason } => Self::Field {
                path: format!("{prefix}.{name}"),
                error: Box::new(Self::InvalidParameter { name, reason }),
            },
            other => Self::Field {
                path: prefix.to_string(),
                error: Box::new(other),
            },
        }
    }

    /// Dotted location of a configuration error, if known.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            Self::Field { path, .. } => Some(path),
            _ => None,
        }
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> LrnsError {
    LrnsError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
