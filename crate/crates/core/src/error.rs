//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point behind camera: z = {z:.6e} <= z_min = {z_min:.1e}")]
    DepthBehindCamera { z: f64, z_min: f64 },

    #[error("mesh is empty or has too few vertices")]
    EmptyMesh,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("degenerate (zero-area) face {face}")]
    DegenerateFace { face: usize },

    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("singular PnP Hessian (condition number {cond:.3e})")]
    SingularHessian { cond: f64 },

    #[error("RANSAC found no consensus (best inlier count {best})")]
    NoConsensus { best: usize },

    #[error("too few points: {got} < {min}")]
    TooFewPoints { got: usize, min: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("representation kind mismatch")]
    KindMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("image too small: min side {side} < {min}")]
    TooSmall { side: usize, min: usize },

    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },

    #[error("no view pairs under the angle cap")]
    NoPairs,

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
