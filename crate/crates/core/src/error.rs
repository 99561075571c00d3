use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the separation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes or lengths that do not line up.
    #[error("structural error: {0}")]
    Structure(String),

    /// A layer chain whose output sizes cannot be produced by its kernel/stride.
    #[error("shape error at layer {layer}: {reason}")]
    Shape { layer: String, reason: String },

    /// Corpus layout problems (missing files, mismatched stems).
    #[error("corpus error in track `{track}`: {reason}")]
    Corpus { track: String, reason: String },

    /// Metric undefined for a (track, source) pair, e.g. silent reference.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// NaN or infinite values met during training or inference.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed container, checkpoint or audio file.
    #[error("format error: {0}")]
    Format(String),

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            reason: reason.into(),
        }
    }

    /// True for errors that indicate a numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
