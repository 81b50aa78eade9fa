// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic anomaly injection: a normalized-space training injector with
//! coverage control and a physical-space test injector.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::series::AnomalyMask;

mod physical;
mod train;

pub use physical::{inject_test, AnomalyType, Regime, TestInjectConfig, CATALOG_VERSION};
pub use train::{corrupt_training, curriculum_probability, inject_training, Tier, TrainInjectConfig, TrainType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Normalized,
    Physical,
}

/// Which channels a segment touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    Discharge,
    Stage,
    Both,
}

impl Channels {
    pub const ALL: [Channels; 3] = [Channels::Discharge, Channels::Stage, Channels::Both];

    pub fn discharge(self) -> bool {
        matches!(self, Channels::Discharge | Channels::Both)
    }

    pub fn stage(self) -> bool {
        matches!(self, Channels::Stage | Channels::Both)
    }
}

/// One injected segment `[start, end)` and the parameters actually drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub type_id: u8,
    pub type_name: String,
    pub variant: String,
    pub start: usize,
    pub end: usize,
    pub channels: Channels,
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Clean,
    Single,
    Compound,
}

/// Provenance of one injection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub mask: AnomalyMask,
    pub segments: Vec<SegmentRecord>,
    pub seed: u64,
    pub realized_coverage: f64,
    pub space: Space,
    pub composition: Composition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_coverage: Option<f64>,
    #[serde(default)]
    pub attempts: usize,
}

impl CorruptionRecord {
    pub fn clean(len: usize, seed: u64, space: Space) -> Self {
        CorruptionRecord {
            mask: AnomalyMask::clean(len),
            segments: Vec::new(),
            seed,
            realized_coverage: 0.0,
            space,
            composition: Composition::Clean,
            tier: None,
            target_coverage: None,
            attempts: 0,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.segments.is_empty()
    }

    /// Distinct type ids in draw order.
    pub fn type_ids(&self) -> Vec<u8> {
        let mut out: Vec<u8> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.type_id) {
                out.push(s.type_id);
            }
        }
        out
    }
}

pub(crate) fn params<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (String::from(k), v)).collect()
}

/// Non-overlapping placement of segment lengths: rejection sampling with a
/// bounded number of draws per segment, then the leftmost free slot.
pub(crate) fn place_segments<R: rand::Rng + ?Sized>(
    lens: &[usize],
    total: usize,
    rng: &mut R,
    max_draws: usize,
) -> Vec<(usize, usize)> {
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let overlaps = |placed: &[(usize, usize)], s: usize, e: usize| placed.iter().any(|&(a, b)| s < b && a < e);
    for &len in lens {
        if len == 0 || len > total {
            continue;
        }
        let mut chosen = None;
        for _ in 0..max_draws {
            let s = crate::rng::uniform_int(rng, 0, total - len);
            if !overlaps(&placed, s, s + len) {
                chosen = Some(s);
                break;
            }
        }
        if chosen.is_none() {
            chosen = (0..=total - len).find(|&s| !overlaps(&placed, s, s + len));
        }
        if let Some(s) = chosen {
            placed.push((s, s + len));
        }
    }
    placed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn placement_never_overlaps() {
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let segs = place_segments(&[100, 150, 144, 120], 576, &mut rng, 100);
            for (i, a) in segs.iter().enumerate() {
                for b in &segs[i + 1..] {
                    assert!(a.1 <= b.0 || b.1 <= a.0);
                }
            }
        }
    }
}
