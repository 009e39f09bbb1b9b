use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampling exhausted after {attempts} attempts: {what}")]
    SamplingExhausted { attempts: usize, what: String },

    #[error("projected object is empty")]
    EmptyProjection,

    #[error("sprite of {sprite_w}x{sprite_h} px does not fit in a {bg_w}x{bg_h} px image")]
    PlacementImpossible {
        sprite_w: usize,
        sprite_h: usize,
        bg_w: usize,
        bg_h: usize,
    },

    #[error("mask contains no set pixel")]
    EmptyMask,

    #[error("class {0} has no ground truth")]
    UndefinedClass(u32),

    #[error("no ground truth to evaluate against")]
    EmptyEvaluation,

    #[error("unknown condition tag {0:?} (valid: fb, mb, po, de, eo, sc, li)")]
    UnknownCondition(String),

    #[error("unknown difficulty {0:?} (valid: easy, medium, hard)")]
    UnknownDifficulty(String),

    #[error("detector unavailable: {0}")]
    DetectorUnavailable(String),

    #[error("model corrupt: {0}")]
    ModelCorrupt(String),

    #[error("adapter protocol error: {0}")]
    AdapterProtocol(String),

    #[error("asset missing: {0}")]
    AssetMissing(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
