use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("cycle detected in partial-order graph")]
    Cycle,

    #[error("no candidate permutations left to choose from")]
    LibraryExhausted,

    #[error("unit {unit}: observed tapped pattern {observed} matches no error-library entry at stage {stage}")]
    NoLibraryMatch {
        unit: usize,
        stage: u32,
        observed: String,
    },

    #[error("bin {bin} has zero width (missing code); weights need a line without missing codes")]
    MissingCode { bin: usize },

    #[error("bin {bin} is not covered by the calibration table ({len} bins)")]
    UncalibratedBin { bin: usize, len: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {inner}")]
    File { path: String, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn in_file(self, path: &std::path::Path) -> Self {
        Error::File {
            path: path.display().to_string(),
            inner: Box::new(self),
        }
    }
}
