use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or binding mismatch between a generator and its inputs.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape error: {0}")]
    Shape(String),
    /// A masked loss was requested over a region with no pixels.
    #[error("degenerate region: the {0} region is empty")]
    DegenerateRegion(&'static str),
    #[error("non-finite loss at step {step} in the {branch} branch (loss = {value})")]
    NonFinite {
        step: usize,
        branch: &'static str,
        value: f64,
    },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// A pipeline stage failed.
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// An I/O failure at `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
