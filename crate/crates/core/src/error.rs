use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("empty mesh")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("zero-area mesh cannot be normalized")]
    ZeroArea,
    #[error("vertex index {index} out of range for {len} vertices")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("eigensolver did not converge (worst residual {residual:.3e})")]
    EigenNoConvergence { residual: f64 },
    #[error("singular deformation system at level k={k} (pivot ratio {rcond:.3e})")]
    Singular { k: usize, rcond: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("gradient leaf not found: {0}")]
    LeafNotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures, as opposed to bad user input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EigenNoConvergence { .. } | Error::Singular { .. } | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
