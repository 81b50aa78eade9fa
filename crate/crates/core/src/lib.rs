// SPDX-License-Identifier: MIT OR Apache-2.0

#![no_std]

extern crate alloc;

pub mod detect;
pub mod error;
pub mod eval;
pub mod inject;
pub mod labels;
pub mod losses;
pub mod math;
pub mod normalize;
pub mod qc;
pub mod rating;
pub mod rng;
pub mod series;
pub mod synth;
pub mod time;
pub mod units;
pub mod window;

pub use error::{Error, Result};
pub use series::{AnomalyMask, HourlySeries, PairedSeries, Partition, QcFlags, SiteMeta, MISSING};
pub use time::{Season, Timestamp};
pub use window::{Window, WindowSpan};
