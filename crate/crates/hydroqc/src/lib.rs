// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, run configuration, artifact storage and the stage pipeline
//! behind the `hydroqc` command.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod stages;

pub use error::{Error, Result};
