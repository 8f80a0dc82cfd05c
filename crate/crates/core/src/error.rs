use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("point {index} maps to the plane at infinity (|w| = {w:e})")]
    ProjectiveDegeneracy { index: usize, w: f64 },

    #[error("homography is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("center {center:?} violates the window boundary on axis {axis}")]
    Boundary { axis: char, center: [usize; 3] },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forward cache does not match this backward call: {0}")]
    Cache(String),

    #[error("insufficient statistics for batch normalization: {0}")]
    InsufficientStatistics(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite score {score} at point {point:?}")]
    NonFiniteScore { point: [f64; 3], score: f64 },

    #[error("tensor build failed at node {node:?}: {source}")]
    Node {
        node: [usize; 3],
        #[source]
        source: Box<Error>,
    },

    #[error("generation check failed: {0}")]
    Generation(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Broad category, used by the command-line driver to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::Boundary { .. } | Error::MissingModel(_) => {
                ErrorKind::Config
            }
            Error::Format(_) | Error::Json(_) => ErrorKind::Format,
            _ => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Format,
    Runtime,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
