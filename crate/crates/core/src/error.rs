use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration record failed validation; `field` names the offending key.
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown class `{class}` (vocabulary: {vocabulary:?})")]
    UnknownClass { class: String, vocabulary: Vec<String> },

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("checkpoint load failed: {0}")]
    Load(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("non-finite loss at epoch {epoch}, batch sample ids {sample_ids:?} (bce={bce}, dice={dice}, iou={iou})")]
    NanLoss {
        epoch: usize,
        sample_ids: Vec<usize>,
        bce: f64,
        dice: f64,
        iou: f64,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

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

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
