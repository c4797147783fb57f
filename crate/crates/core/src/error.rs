use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(ValidationReport),

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate face {face}")]
    DegenerateFace { face: usize },

    #[error("zero skinning weight sum{}", vertex.map(|v| format!(" at vertex {v}")).unwrap_or_default())]
    ZeroWeightSum { vertex: Option<usize> },

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {field}: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn arg(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::LengthMismatch { what, expected, got })
        }
    }
}
