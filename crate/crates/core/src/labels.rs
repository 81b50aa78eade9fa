// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weak labels from raw/corrected archive pairs and window quality filters.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{abs, centered, mean_std, pearson, spearman, true_runs};
use crate::rating::{fit_rating_ransac, RansacConfig};
use crate::series::{is_missing, AnomalyMask, PairedSeries};

pub const PATTERN_LABEL_VERSION: &str = "pattern-diffcorr/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakLabelConfig {
    pub rel_threshold: f64,
    pub eps: f64,
    pub correction_fraction_range: [f64; 2],
    pub station_missing_max: f64,
}

impl Default for WeakLabelConfig {
    fn default() -> Self {
        WeakLabelConfig {
            rel_threshold: 0.01,
            eps: 1e-8,
            correction_fraction_range: [0.10, 0.40],
            station_missing_max: 0.05,
        }
    }
}

impl WeakLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.correction_fraction_range;
        if !(self.rel_threshold > 0.0) || !(self.eps > 0.0) {
            return Err(Error::invalid("label threshold and eps must be positive"));
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("correction fraction range must lie inside (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.station_missing_max) {
            return Err(Error::invalid("station missing limit must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A label track; `labeled` is false where the label is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTrack {
    pub mask: AnomalyMask,
    pub labeled: Vec<bool>,
}

impl LabelTrack {
    pub fn labeled_count(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }

    /// Anomalous fraction over labeled timesteps.
    pub fn anomalous_fraction(&self) -> f64 {
        let n = self.labeled_count();
        if n == 0 {
            return 0.0;
        }
        let k = self
            .mask
            .flags
            .iter()
            .zip(&self.labeled)
            .filter(|(f, l)| **f && **l)
            .count();
        k as f64 / n as f64
    }

    pub fn slice(&self, start: usize, len: usize) -> LabelTrack {
        LabelTrack {
            mask: AnomalyMask {
                flags: self.mask.flags[start..start + len].to_vec(),
                type_labels: None,
            },
            labeled: self.labeled[start..start + len].to_vec(),
        }
    }
}

/// `|corr - raw| / (|raw| + eps)`.
pub fn relative_change(raw: f64, corrected: f64, eps: f64) -> f64 {
    abs(corrected - raw) / (abs(raw) + eps)
}

/// Larger of the discharge and stage relative corrections at `k`; `None`
/// where any channel is missing.
pub fn correction_magnitude(p: &PairedSeries, k: usize, eps: f64) -> Option<f64> {
    p.complete(k).then(|| {
        relative_change(p.discharge_raw[k], p.discharge_corrected[k], eps).max(relative_change(
            p.stage_raw[k],
            p.stage_corrected[k],
            eps,
        ))
    })
}

/// Anomalous where either relative correction is strictly above the
/// threshold.
pub fn weak_labels(p: &PairedSeries, cfg: &WeakLabelConfig) -> LabelTrack {
    let n = p.len();
    let mut flags = vec![false; n];
    let mut labeled = vec![false; n];
    for k in 0..n {
        if let Some(m) = correction_magnitude(p, k, cfg.eps) {
            labeled[k] = true;
            flags[k] = m > cfg.rel_threshold;
        }
    }
    LabelTrack {
        mask: AnomalyMask {
            flags,
            type_labels: None,
        },
        labeled,
    }
}

/// Labeled-anomalous fraction at each threshold.
pub fn threshold_sweep(p: &PairedSeries, thresholds: &[f64], eps: f64) -> Vec<f64> {
    let mags: Vec<f64> = (0..p.len()).filter_map(|k| correction_magnitude(p, k, eps)).collect();
    thresholds
        .iter()
        .map(|&th| {
            if mags.is_empty() {
                0.0
            } else {
                mags.iter().filter(|&&m| m > th).count() as f64 / mags.len() as f64
            }
        })
        .collect()
}

/// Fraction of hours missing any of the four channels.
pub fn station_missing_fraction(p: &PairedSeries) -> f64 {
    if p.is_empty() {
        return 1.0;
    }
    (0..p.len()).filter(|&k| !p.complete(k)).count() as f64 / p.len() as f64
}

pub fn station_missing_filter(p: &PairedSeries, cfg: &WeakLabelConfig) -> bool {
    station_missing_fraction(p) <= cfg.station_missing_max
}

/// Accepts a window whose labeled-anomalous fraction lies in the range.
pub fn correction_fraction_filter(track: &LabelTrack, cfg: &WeakLabelConfig) -> bool {
    let f = track.anomalous_fraction();
    let [lo, hi] = cfg.correction_fraction_range;
    track.labeled_count() > 0 && f >= lo && f <= hi
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowQualityConfig {
    pub cv_min: f64,
    pub spearman_min: f64,
    pub b_range: [f64; 2],
    pub r2_min: f64,
    pub valid_min: f64,
    pub flatline_max: f64,
    /// Stage precision for the flatline test, ft.
    pub flatline_tol: f64,
    pub ransac: RansacConfig,
}

impl Default for WindowQualityConfig {
    fn default() -> Self {
        WindowQualityConfig {
            cv_min: 0.10,
            spearman_min: 0.5,
            b_range: [0.5, 10.0],
            r2_min: 0.3,
            valid_min: 0.70,
            flatline_max: 0.30,
            flatline_tol: 0.001,
            ransac: RansacConfig {
                datum_grid: None,
                min_points: 20,
                iterations: 200,
                ..RansacConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityChecks {
    pub variability: bool,
    pub monotonic: bool,
    pub exponent: bool,
    pub fit: bool,
    pub valid: bool,
    pub flatline: bool,
}

impl QualityChecks {
    pub fn all(&self) -> bool {
        self.variability && self.monotonic && self.exponent && self.fit && self.valid && self.flatline
    }
}

/// Statistics of one window of the corrected series. Undefined statistics
/// are NaN and fail their check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowQualityReport {
    pub cv_h: f64,
    pub spearman_qh: f64,
    pub rating_b: f64,
    pub rating_r2: f64,
    pub valid_fraction: f64,
    pub flatline_fraction: f64,
    pub checks: QualityChecks,
    pub pass: bool,
}

/// `R^2` of `ln Q = ln a + b ln H` over the positive pairs.
fn log_r2(h: &[f64], q: &[f64], a: f64, b: f64) -> f64 {
    let (x, y): (Vec<f64>, Vec<f64>) = h
        .iter()
        .zip(q)
        .filter(|(h, q)| **h > 0.0 && **q > 0.0)
        .map(|(h, q)| (crate::math::ln(*h), crate::math::ln(*q)))
        .unzip();
    let Some((my, _)) = mean_std(&y) else { return f64::NAN };
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sst <= 0.0 {
        return f64::NAN;
    }
    let la = crate::math::ln(a);
    let sse: f64 = x.iter().zip(&y).map(|(x, y)| (y - la - b * x) * (y - la - b * x)).sum();
    1.0 - sse / sst
}

pub fn window_quality<R: Rng + ?Sized>(
    q: &[f64],
    h: &[f64],
    cfg: &WindowQualityConfig,
    rng: &mut R,
) -> WindowQualityReport {
    let n = h.len().max(1) as f64;
    let cv_h = match mean_std(h) {
        Some((m, s)) if m != 0.0 => s / abs(m),
        _ => f64::NAN,
    };
    let spearman_qh = spearman(h, q).unwrap_or(f64::NAN);
    let (rating_b, rating_r2) = match fit_rating_ransac(h, q, &cfg.ransac, rng) {
        Ok(f) => (f.b, log_r2(h, q, f.a, f.b)),
        Err(_) => (f64::NAN, f64::NAN),
    };
    let valid = h.iter().zip(q).filter(|(h, q)| **h > 0.0 && **q > 0.0).count();
    let flat = (1..h.len())
        .filter(|&t| !is_missing(h[t]) && !is_missing(h[t - 1]) && abs(h[t] - h[t - 1]) < cfg.flatline_tol)
        .count();
    let valid_fraction = valid as f64 / n;
    let flatline_fraction = flat as f64 / n;
    let checks = QualityChecks {
        variability: cv_h > cfg.cv_min,
        monotonic: spearman_qh > cfg.spearman_min,
        exponent: rating_b >= cfg.b_range[0] && rating_b <= cfg.b_range[1],
        fit: rating_r2 >= cfg.r2_min,
        valid: valid_fraction >= cfg.valid_min,
        flatline: flatline_fraction < cfg.flatline_max,
    };
    WindowQualityReport {
        cv_h,
        spearman_qh,
        rating_b,
        rating_r2,
        valid_fraction,
        flatline_fraction,
        pass: checks.all(),
        checks,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternLabelConfig {
    pub window_h: usize,
    pub min_corr: f64,
    pub min_run_h: usize,
}

impl Default for PatternLabelConfig {
    fn default() -> Self {
        PatternLabelConfig {
            window_h: 24,
            min_corr: 0.5,
            min_run_h: 3,
        }
    }
}

fn diffs(x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| if t == 0 { f64::NAN } else { x[t] - x[t - 1] })
        .collect()
}

/// Rolling correlation of first differences. Identical windows score 1;
/// windows where one side is flat and the other is not score 0.
pub fn rolling_diff_correlation(raw: &[f64], corrected: &[f64], window_h: usize) -> Vec<f64> {
    let (dr, dc) = (diffs(raw), diffs(corrected));
    let (before, after) = (window_h / 2, window_h - window_h / 2 - 1);
    (0..raw.len())
        .map(|t| {
            let (a, b) = centered(t, raw.len(), before, after);
            let same = (a..b).all(|i| !(dr[i].is_finite() && dc[i].is_finite()) || dr[i] == dc[i]);
            if same {
                1.0
            } else {
                pearson(&dr[a..b], &dc[a..b]).unwrap_or(0.0)
            }
        })
        .collect()
}

/// Multi-point segments where the corrected hydrograph shape departs from
/// the raw one: timesteps that were edited and whose rolling
/// first-difference correlation (discharge or stage) falls below
/// `min_corr`, kept as runs of at least `min_run_h` hours.
pub fn pattern_labels(p: &PairedSeries, cfg: &PatternLabelConfig) -> LabelTrack {
    let n = p.len();
    let cq = rolling_diff_correlation(&p.discharge_raw, &p.discharge_corrected, cfg.window_h);
    let ch = rolling_diff_correlation(&p.stage_raw, &p.stage_corrected, cfg.window_h);
    let labeled: Vec<bool> = (0..n).map(|k| p.complete(k)).collect();
    let candidate: Vec<bool> = (0..n)
        .map(|k| {
            let edited = p.discharge_raw[k] != p.discharge_corrected[k] || p.stage_raw[k] != p.stage_corrected[k];
            labeled[k] && edited && (cq[k] < cfg.min_corr || ch[k] < cfg.min_corr)
        })
        .collect();
    let mut flags = vec![false; n];
    for (s, e) in true_runs(&candidate) {
        if e - s >= cfg.min_run_h {
            flags[s..e].iter_mut().for_each(|f| *f = true);
        }
    }
    LabelTrack {
        mask: AnomalyMask {
            flags,
            type_labels: None,
        },
        labeled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{powf, sin};
    use crate::rng::rng_from_seed;
    use crate::time::Timestamp;
    use alloc::string::ToString;

    fn paired(qr: Vec<f64>, qc: Vec<f64>, hr: Vec<f64>, hc: Vec<f64>) -> PairedSeries {
        PairedSeries {
            site_id: "x".to_string(),
            start: Timestamp(0),
            stage_raw: hr,
            stage_corrected: hc,
            discharge_raw: qr,
            discharge_corrected: qc,
        }
    }

    fn hydrograph(n: usize) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = (0..n)
            .map(|t| 3.0 + 1.2 * sin(t as f64 / 30.0) + 0.3 * sin(t as f64 / 7.0))
            .collect();
        let q = h.iter().map(|&x| 5.0 * powf(x, 1.8)).collect();
        (q, h)
    }

    #[test]
    fn scalar_corrections() {
        let p = paired(vec![100.0; 3], vec![102.0, 100.5, 101.0], vec![2.0; 3], vec![2.0; 3]);
        let t = weak_labels(&p, &WeakLabelConfig::default());
        assert_eq!(t.mask.flags, vec![true, false, false]);
        assert!((relative_change(100.0, 102.0, 1e-8) - 0.0199999999980).abs() < 1e-12);
    }

    #[test]
    fn boundary_is_strict() {
        let eps = WeakLabelConfig::default().eps;
        // A pair whose relative change is exactly 0.01 in floating point.
        let (qr, qc) = (1..10_000)
            .map(|i| {
                let r = 100.0 + i as f64 * 0.37;
                (r, r + 0.01 * (r + eps))
            })
            .find(|&(r, c)| relative_change(r, c, eps) == 0.01)
            .unwrap();
        let p = paired(vec![qr, qr], vec![qc, qc * (1.0 + 1e-12)], vec![1.0; 2], vec![1.0; 2]);
        let t = weak_labels(&p, &WeakLabelConfig::default());
        assert_eq!(t.mask.flags, vec![false, true]);
    }

    #[test]
    fn missing_is_unlabeled() {
        let p = paired(vec![1.0, f64::NAN], vec![5.0, 5.0], vec![1.0; 2], vec![1.0; 2]);
        let t = weak_labels(&p, &WeakLabelConfig::default());
        assert_eq!(t.labeled, vec![true, false]);
        assert_eq!(t.mask.flags, vec![true, false]);
    }

    #[test]
    fn identical_archives_have_no_labels() {
        let (q, h) = hydrograph(600);
        let p = paired(q.clone(), q, h.clone(), h);
        assert_eq!(weak_labels(&p, &WeakLabelConfig::default()).mask.count(), 0);
        assert_eq!(pattern_labels(&p, &PatternLabelConfig::default()).mask.count(), 0);
    }

    #[test]
    fn station_filter_boundary() {
        let mk = |missing: usize| {
            let mut qr = vec![1.0; 100];
            for v in &mut qr[..missing] {
                *v = f64::NAN;
            }
            paired(qr, vec![1.0; 100], vec![1.0; 100], vec![1.0; 100])
        };
        let cfg = WeakLabelConfig::default();
        assert!(station_missing_filter(&mk(0), &cfg));
        assert!(station_missing_filter(&mk(5), &cfg));
        assert!(!station_missing_filter(&mk(6), &cfg));
    }

    #[test]
    fn correction_fraction_bounds() {
        let cfg = WeakLabelConfig::default();
        let track = |k: usize| LabelTrack {
            mask: AnomalyMask {
                flags: (0..100).map(|i| i < k).collect(),
                type_labels: None,
            },
            labeled: vec![true; 100],
        };
        assert!(correction_fraction_filter(&track(25), &cfg));
        assert!(!correction_fraction_filter(&track(5), &cfg));
        assert!(!correction_fraction_filter(&track(45), &cfg));
    }

    #[test]
    fn power_law_window_passes() {
        let (q, h) = hydrograph(576);
        let r = window_quality(&q, &h, &WindowQualityConfig::default(), &mut rng_from_seed(1));
        assert!(r.pass, "{r:?}");
        assert!((r.rating_b - 1.8).abs() < 1e-6);
        assert!((r.rating_r2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_stage_fails_variability() {
        let r = window_quality(
            &[5.0; 576],
            &[2.0; 576],
            &WindowQualityConfig::default(),
            &mut rng_from_seed(1),
        );
        assert_eq!(r.cv_h, 0.0);
        assert!(!r.checks.variability && !r.pass);
    }

    #[test]
    fn flatline_fraction_fails() {
        let (mut q, mut h) = hydrograph(576);
        // 35% of steps frozen.
        let k = (0.35 * 576.0) as usize;
        for t in 100..100 + k + 1 {
            h[t] = h[100];
            q[t] = q[100];
        }
        let r = window_quality(&q, &h, &WindowQualityConfig::default(), &mut rng_from_seed(1));
        assert!(r.flatline_fraction >= 0.35);
        assert!(!r.checks.flatline);
    }

    #[test]
    fn pattern_labels_flatline_replacement() {
        let (q, h) = hydrograph(400);
        let (mut qr, mut hr) = (q.clone(), h.clone());
        for t in 150..198 {
            qr[t] = q[150];
            hr[t] = h[150];
        }
        let p = paired(qr, q, hr, h);
        let t = pattern_labels(&p, &PatternLabelConfig::default());
        // The rolling window blurs the edges; the interior is fully flagged.
        for k in 162..186 {
            assert!(t.mask.flags[k], "{k}");
        }
        assert!(!t.mask.flags[..150].iter().any(|&f| f));
        assert!(!t.mask.flags[198..].iter().any(|&f| f));
    }

    #[test]
    fn pattern_labels_ignore_single_point() {
        let (q, h) = hydrograph(200);
        let mut qr = q.clone();
        qr[100] *= 3.0;
        let p = paired(qr, q, h.clone(), h);
        assert_eq!(pattern_labels(&p, &PatternLabelConfig::default()).mask.count(), 0);
        assert_eq!(weak_labels(&p, &WeakLabelConfig::default()).mask.count(), 1);
    }

    #[test]
    fn sweep_is_non_increasing() {
        let (q, h) = hydrograph(300);
        let qr: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + 0.002 * (i % 50) as f64))
            .collect();
        let ths = [0.001, 0.005, 0.01, 0.02, 0.05, 0.1];
        let fr = threshold_sweep(&paired(qr, q, h.clone(), h), &ths, 1e-8);
        assert!(fr.windows(2).all(|w| w[1] <= w[0]));
        assert!(fr[0] > fr[5]);
    }
}
