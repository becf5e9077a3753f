use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sequence")]
    EmptySequence,

    #[error("non-finite code at ({row}, {col})")]
    NonFiniteCode { row: usize, col: usize },

    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("rescale similarity: transport kernel is not finite")]
    TransportOverflow,

    #[error("sinkhorn did not reach tolerance {tol:e} within {iterations} iterations")]
    NotConverged { tol: f64, iterations: usize },

    #[error("non-finite activation in {stage} layer {layer}")]
    NonFiniteActivation { stage: &'static str, layer: usize },

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("missing forward trace for {0}")]
    MissingTrace(&'static str),

    #[error("sequence too short for transcript: {frames} frames, {segments} segments of at least {min_len}")]
    SequenceTooShort {
        frames: usize,
        segments: usize,
        min_len: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("infeasible synthetic config: {0}")]
    Infeasible(String),

    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: unexpected EOF")]
    UnexpectedEof { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            context,
            expected,
            actual,
        }
    }
}
