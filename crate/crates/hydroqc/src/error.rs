// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    /// A stage ran before the stage whose output it reads.
    #[error("{missing} not found; run `hydroqc {stage}` first")]
    Dependency { stage: &'static str, missing: PathBuf },

    /// An input artifact was produced under a different config or seed.
    #[error("{path} was produced with a different configuration; rerun `hydroqc {stage}`")]
    Stale { path: PathBuf, stage: &'static str },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] hydroqc_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("verification failed: {0}")]
    Verify(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// 0 success, 1 usage, 2 data, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Dependency { .. } | Error::Stale { .. } => 1,
            Error::Verify(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
