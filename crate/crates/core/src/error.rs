use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mesh file error at line {line}: {message}")]
    MeshFormat { line: usize, message: String },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("coefficient field does not cover {0}")]
    IncompleteField(String),

    #[error("raster error: {0}")]
    Raster(String),

    #[error("element {element}: local saddle system is singular ({detail})")]
    SpdViolation { element: usize, detail: String },

    #[error("matrix not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("pairing system for the element constants is singular: {0}")]
    MeshConnectivity(String),

    #[error("patch problem seeded at {seed} is not positive definite")]
    PatchFactorization { seed: String },

    #[error("{stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                message: other.to_string(),
            },
        }
    }
}
