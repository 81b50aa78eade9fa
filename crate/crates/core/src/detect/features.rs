// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use libm::log1p as ln_1p;
use serde::{Deserialize, Serialize};

use super::recon::Reconstruction;
use crate::math::{abs, centered, mad, median, pearson, std_dev};

pub const N_DETECTION_FEATURES: usize = 11;
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

/// Channel order of [`DetectionFeatures`].
pub const FEATURE_NAMES: [&str; N_DETECTION_FEATURES] = [
    "abs_resid_q",
    "abs_resid_h",
    "diff_q",
    "diff_h",
    "roll_std_q",
    "roll_std_h",
    "roll_std_resid_q",
    "roll_std_resid_h",
    "rating_log_resid",
    "roll_corr_qh",
    "resid_product",
];

const ROLL_H: usize = 7;
const MAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionFeatures {
    pub layout: u32,
    pub values: Vec<[f64; N_DETECTION_FEATURES]>,
}

impl DetectionFeatures {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn rolling(x: &[f64], f: impl Fn(&[f64]) -> Option<f64>) -> Vec<f64> {
    let (before, after) = (ROLL_H / 2, ROLL_H - ROLL_H / 2 - 1);
    (0..x.len())
        .map(|t| {
            let (a, b) = centered(t, x.len(), before, after);
            if x[a..b].iter().filter(|v| v.is_finite()).count() < 2 {
                return f64::NAN;
            }
            f(&x[a..b]).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Raw (unstandardized) feature channels; undefined entries are NaN.
pub fn raw_feature_channels(q: &[f64], h: &[f64], r: &Reconstruction) -> [Vec<f64>; N_DETECTION_FEATURES] {
    let n = q.len();
    let rq: Vec<f64> = (0..n).map(|t| q[t] - r.discharge[t]).collect();
    let rh: Vec<f64> = (0..n).map(|t| h[t] - r.stage[t]).collect();
    let diff = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|t| if t == 0 { f64::NAN } else { x[t] - x[t - 1] })
            .collect()
    };
    let rating: Vec<f64> = (0..n)
        .map(|t| {
            r.rating
                .and_then(|f| {
                    if h[t].is_finite() {
                        f.log_residual(h[t], q[t])
                    } else {
                        None
                    }
                })
                .unwrap_or(f64::NAN)
        })
        .collect();
    let corr: Vec<f64> = (0..n)
        .map(|t| {
            let (a, b) = centered(t, n, ROLL_H / 2, ROLL_H - ROLL_H / 2 - 1);
            pearson(&q[a..b], &h[a..b]).unwrap_or(f64::NAN)
        })
        .collect();
    [
        rq.iter().map(|v| abs(*v)).collect(),
        rh.iter().map(|v| abs(*v)).collect(),
        diff(q),
        diff(h),
        rolling(q, std_dev),
        rolling(h, std_dev),
        rolling(&rq, std_dev),
        rolling(&rh, std_dev),
        rating,
        corr,
        rq.iter().zip(&rh).map(|(a, b)| a * b).collect(),
    ]
}

/// `z = (x - median) / (1.4826 MAD)` with the MAD floored, then compressed
/// to `sign(z) ln(1 + |z|)`; undefined entries become 0.
pub fn robust_standardize(x: &[f64]) -> Vec<f64> {
    let (Some(m), Some(d)) = (median(x), mad(x)) else {
        return vec![0.0; x.len()];
    };
    let s = 1.4826 * d.max(MAD_FLOOR);
    x.iter()
        .map(|&v| {
            if !v.is_finite() {
                return 0.0;
            }
            let z = (v - m) / s;
            z.signum() * ln_1p(abs(z))
        })
        .collect()
}

pub fn extract_detection_features(q: &[f64], h: &[f64], r: &Reconstruction) -> DetectionFeatures {
    let raw = raw_feature_channels(q, h, r);
    let std: Vec<Vec<f64>> = raw.iter().map(|c| robust_standardize(c)).collect();
    let values = (0..q.len())
        .map(|t| {
            let mut row = [0.0; N_DETECTION_FEATURES];
            for (c, v) in row.iter_mut().enumerate() {
                *v = std[c][t];
            }
            row
        })
        .collect();
    DetectionFeatures {
        layout: FEATURE_LAYOUT_VERSION,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::recon::ReferenceReconstructor;
    use crate::math::{powf, sin};

    #[test]
    fn perfect_reconstruction_zero_residuals() {
        let h: Vec<f64> = (0..100).map(|t| 2.0 + sin(t as f64 / 9.0)).collect();
        let q: Vec<f64> = h.iter().map(|&x| powf(x, 2.0)).collect();
        let r = Reconstruction {
            discharge: q.clone(),
            stage: h.clone(),
            rating: None,
        };
        let raw = raw_feature_channels(&q, &h, &r);
        for c in [0, 1, 10] {
            assert!(raw[c].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_window_all_zero() {
        let (q, h) = (vec![4.0; 576], vec![1.5; 576]);
        let r = ReferenceReconstructor::default().reconstruct_traces(&q, &h).unwrap();
        let f = extract_detection_features(&q, &h, &r);
        assert!(f.values.iter().all(|row| row.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn spike_peaks_in_residual_channels() {
        let h: Vec<f64> = (0..576).map(|t| 3.0 + 0.8 * sin(t as f64 / 40.0)).collect();
        let mut q: Vec<f64> = h.iter().map(|&x| 4.0 * powf(x - 1.0, 1.6)).collect();
        let t0 = 300;
        q[t0] *= 3.0;
        let r = ReferenceReconstructor::default().reconstruct_traces(&q, &h).unwrap();
        let f = extract_detection_features(&q, &h, &r);
        for c in [0, 2, 6] {
            let col: Vec<f64> = f.values.iter().map(|row| row[c]).collect();
            let arg = (0..576)
                .max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a)))
                .unwrap();
            assert!(arg.abs_diff(t0) <= 3, "channel {c} peaks at {arg}");
        }
    }
}
