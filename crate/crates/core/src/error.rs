// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("timestamps not sorted ascending at index {index}")]
    Unsorted { index: usize },

    #[error("non-finite value {value} in {context}")]
    NonFinite { context: &'static str, value: f64 },

    #[error("negative physical value {value} (quality control should have removed it)")]
    Negative { value: f64 },

    #[error("denormalization overflow for normalized value {value}")]
    Overflow { value: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("rating fit failed: {0}")]
    FitFailed(String),

    #[error("{0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn insufficient(msg: impl Into<String>) -> Self {
        Error::Insufficient(msg.into())
    }
}
