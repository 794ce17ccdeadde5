use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::BackboneError;

/// Top-level error for pipeline and CLI operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("inversion failed at step {step}: {reason}")]
    Inversion { step: usize, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("adapter `{adapter}` failed: {reason}")]
    Adapter { adapter: &'static str, reason: String },
    #[error("missing fixture for adapter `{adapter}` at {path}")]
    FixtureMissing { adapter: &'static str, path: PathBuf },
    #[error("hand masks overlap; overlay stage skipped")]
    OverlapSkip,
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    pub fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage { stage: stage.into(), source: Box::new(source) }
    }

    /// Process exit code: 2 validation, 3 external adapter, 4 stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Shape(_) => 2,
            Error::Adapter { .. } | Error::FixtureMissing { .. } => 3,
            Error::Backbone(BackboneError::Unavailable(_)) => 3,
            Error::Backbone(BackboneError::Config(_)) | Error::Backbone(BackboneError::Contract(_)) => 2,
            Error::Stage { source, .. } => match source.exit_code() {
                3 => 3,
                _ => 4,
            },
            _ => 4,
        }
    }
}
