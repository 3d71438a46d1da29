use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Iterate and residual carried out of a Krylov solve that ran out of iterations.
#[derive(Debug, Clone)]
pub struct ConvergenceFailure {
    pub iterations: usize,
    pub relative_residual: f64,
    /// Column index of the right-hand side that failed.
    pub column: usize,
    pub best_iterate: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("out of hierarchy: {0}")]
    OutOfHierarchy(String),

    #[error(
        "singular system: component containing sample {root} ({size} samples) has neither prior coupling nor a seed"
    )]
    Singular { root: usize, size: usize },

    #[error("matrix is not positive definite at pivot {pivot} (value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error(
        "no convergence in column {} after {} iterations (relative residual {:e})",
        .0.column, .0.iterations, .0.relative_residual
    )]
    NoConvergence(Box<ConvergenceFailure>),

    #[error("krylov breakdown: {0}")]
    Breakdown(String),

    #[error("curvature population detection failed: {reason}")]
    PopulationDetection {
        reason: String,
        /// `(bin_center, count)` pairs of the histogram that failed.
        histogram: Vec<(f64, u64)>,
    },

    #[error("invalid hierarchy: {0}")]
    Structure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::OutOfHierarchy(_) => "out-of-hierarchy",
            Error::Singular { .. } => "singular",
            Error::NotPositiveDefinite { .. } => "not-positive-definite",
            Error::NoConvergence(_) => "no-convergence",
            Error::Breakdown(_) => "breakdown",
            Error::PopulationDetection { .. } => "population-detection",
            Error::Structure(_) => "structure",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// JSON object describing the error, used by the CLI on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
        });
        match self {
            Error::Singular { root, size } => {
                obj["component_root"] = (*root).into();
                obj["component_size"] = (*size).into();
            }
            Error::NoConvergence(f) => {
                obj["iterations"] = f.iterations.into();
                obj["relative_residual"] = f.relative_residual.into();
            }
            Error::PopulationDetection { histogram, .. } => {
                obj["histogram"] = histogram
                    .iter()
                    .map(|(c, n)| serde_json::json!([c, n]))
                    .collect::<Vec<_>>()
                    .into();
            }
            _ => {}
        }
        obj
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
