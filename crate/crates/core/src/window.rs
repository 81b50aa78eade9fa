// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed-length windows over hourly series.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::series::{HourlySeries, QcFlags};
use crate::time::Timestamp;

pub const WINDOW_LEN: usize = 576;
pub const TRAIN_STRIDE: usize = 48;
pub const EVAL_STRIDE: usize = 192;
pub const N_FEATURES: usize = 12;

/// Feature channel layout (fixed order).
pub mod channel {
    pub const LATITUDE: usize = 0;
    pub const LONGITUDE: usize = 1;
    pub const DRAINAGE_AREA: usize = 2;
    pub const ELEVATION: usize = 3;
    pub const DISCHARGE: usize = 4;
    pub const STAGE: usize = 5;
    pub const SIGMA_LN_Q: usize = 6;
    pub const SIGMA_LN_H: usize = 7;
    pub const RANK_AREA: usize = 8;
    pub const RANK_ELEVATION: usize = 9;
    pub const SEASONAL_Q: usize = 10;
    pub const SEASONAL_H: usize = 11;

    pub const NAMES: [&str; super::N_FEATURES] = [
        "latitude",
        "longitude",
        "drainage_area",
        "elevation",
        "discharge",
        "stage",
        "sigma_ln_q",
        "sigma_ln_h",
        "rank_area",
        "rank_elevation",
        "seasonal_q",
        "seasonal_h",
    ];
}

/// Location of a window inside its source series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowSpan {
    pub offset: usize,
    pub start: Timestamp,
}

/// Normalization parameters a window was built with, so its normalized
/// channels can be mapped back to physical units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowNorm {
    pub mu_ln_q: f64,
    pub sigma_ln_q: f64,
    pub mu_ln_h: f64,
    pub sigma_ln_h: f64,
    pub epsilon: f64,
    pub clip_tau: f64,
}

impl WindowNorm {
    fn inverse(y: f64, mu: f64, sigma: f64, eps: f64) -> f64 {
        crate::math::exp(y * (sigma + eps) + mu) - eps
    }

    fn forward(v: f64, mu: f64, sigma: f64, eps: f64, tau: f64) -> f64 {
        ((crate::math::ln(v.max(0.0) + eps) - mu) / (sigma + eps)).clamp(-tau, tau)
    }

    pub fn q_to_physical(&self, y: f64) -> f64 {
        Self::inverse(y, self.mu_ln_q, self.sigma_ln_q, self.epsilon)
    }

    pub fn h_to_physical(&self, y: f64) -> f64 {
        Self::inverse(y, self.mu_ln_h, self.sigma_ln_h, self.epsilon)
    }

    /// Clipped normalized discharge; negative input is treated as zero.
    pub fn q_to_normalized(&self, v: f64) -> f64 {
        Self::forward(v, self.mu_ln_q, self.sigma_ln_q, self.epsilon, self.clip_tau)
    }

    pub fn h_to_normalized(&self, v: f64) -> f64 {
        Self::forward(v, self.mu_ln_h, self.sigma_ln_h, self.epsilon, self.clip_tau)
    }
}

/// A 576-step window: 12 normalized feature channels plus the physical
/// discharge/stage traces they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub site_id: String,
    pub start: Timestamp,
    pub features: Vec<[f64; N_FEATURES]>,
    pub discharge: Vec<f64>,
    pub stage: Vec<f64>,
    pub observation_mask: Vec<bool>,
    pub norm: WindowNorm,
}

impl Window {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.features.iter().map(|row| row[c]).collect()
    }

    pub fn set_channel(&mut self, c: usize, values: &[f64]) {
        for (row, &v) in self.features.iter_mut().zip(values) {
            row[c] = v;
        }
    }

    pub fn timestamps(&self) -> impl Iterator<Item = Timestamp> + '_ {
        (0..self.len()).map(move |k| self.start.plus_hours(k as i64))
    }
}

/// Window start offsets `0, stride, 2*stride, ...`, dropping any candidate
/// that overlaps an excluded timestep. Series shorter than one window yield
/// no windows.
pub fn segment_windows(series: &HourlySeries, stride: usize) -> Vec<WindowSpan> {
    segment_windows_with_len(series, stride, WINDOW_LEN)
}

pub fn segment_windows_with_len(series: &HourlySeries, stride: usize, len: usize) -> Vec<WindowSpan> {
    assert!(stride > 0, "stride must be positive");
    let n = series.len();
    if n < len || len == 0 {
        return Vec::new();
    }
    // prefix counts of excluded timesteps
    let mut excluded = Vec::with_capacity(n + 1);
    excluded.push(0usize);
    for f in &series.flags {
        let last = *excluded.last().unwrap();
        excluded.push(last + usize::from(f.contains(QcFlags::EXCLUDED)));
    }
    (0..=(n - len))
        .step_by(stride)
        .filter(|&o| excluded[o + len] == excluded[o])
        .map(|offset| WindowSpan {
            offset,
            start: series.timestamp(offset),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn clean(len: usize) -> HourlySeries {
        HourlySeries::new("s", Timestamp(0), vec![1.0; len], vec![1.0; len]).unwrap()
    }

    #[test]
    fn exact_length_gives_one_window() {
        assert_eq!(segment_windows(&clean(576), 48).len(), 1);
        assert!(segment_windows(&clean(575), 48).is_empty());
    }

    #[test]
    fn count_formula() {
        let w = segment_windows(&clean(624), 48);
        assert_eq!(w.iter().map(|s| s.offset).collect::<Vec<_>>(), vec![0, 48]);
    }

    #[test]
    fn excluded_hour_drops_overlapping_windows() {
        let mut s = clean(1200);
        s.flags[600] = QcFlags::EXCLUDED;
        // brute-force overlap enumeration
        let expected: Vec<usize> = (0..=(1200 - 576))
            .step_by(192)
            .filter(|&o| !(o..o + 576).contains(&600))
            .collect();
        let got: Vec<usize> = segment_windows(&s, 192).iter().map(|w| w.offset).collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![0]);
    }
}
