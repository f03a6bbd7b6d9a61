use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdcError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context} at state {state}")]
    NonFinite { context: &'static str, state: usize },

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("solver failed at grid point {index} ({point:?}): {source}")]
    GridPoint {
        index: usize,
        point: Vec<f64>,
        #[source]
        source: Box<DdcError>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("ratio matrix is empty: no cell passed the positivity floor {floor:e}")]
    EmptyMatrix { floor: f64 },

    #[error("eigenvalue collision: minimum gap {gap:e} below tolerance {tol:e}")]
    EigenvalueCollision { gap: f64, tol: f64 },

    #[error("operator rank {rank} below the number of types {types}; injectivity fails")]
    NotInjective { rank: usize, types: usize },

    #[error("factorization residual {residual:e} exceeds {tol:e} for {which}")]
    Factorization {
        which: &'static str,
        residual: f64,
        tol: f64,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DdcError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DdcError::NonFinite { .. }
                | DdcError::Convergence { .. }
                | DdcError::GridPoint { .. }
                | DdcError::Numeric(_)
                | DdcError::EmptyMatrix { .. }
                | DdcError::EigenvalueCollision { .. }
                | DdcError::NotInjective { .. }
                | DdcError::Factorization { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DdcError>;
