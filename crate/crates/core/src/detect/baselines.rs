// SPDX-License-Identifier: MIT OR Apache-2.0

//! Statistical and rule-based detectors on the physical traces. Each
//! channel is scored separately and the per-timestep score is the larger of
//! the two; missing values score 0.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Baseline, DetectionResult, FlagRule};
use crate::math::{abs, centered, mean_std, median, pearson, quantile, quantile_sorted, sorted_finite};
use crate::normalize::MonthlyBands;
use crate::rating::window_rating_theil_sen;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub z_threshold: f64,
    pub iqr_k: f64,
    pub ma_window_h: usize,
    pub ma_k: f64,
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
    pub iforest_contamination: f64,
    pub lof_k: usize,
    pub lof_threshold: f64,
    pub stl_period_h: usize,
    pub stl_trend_h: usize,
    pub stl_k: f64,
    pub rating_k: f64,
    pub rating_datum_offset_ft: f64,
    pub roc_quantile: f64,
    pub roc_floor: f64,
    pub roc_min_changes: usize,
    pub persistence_run_h: usize,
    pub persistence_q_rel: f64,
    pub persistence_h_ft: f64,
    pub qh_corr_window_h: usize,
    pub qh_corr_min: f64,
    pub qh_lag_h: usize,
    pub qh_noise_mult: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            z_threshold: 3.0,
            iqr_k: 1.5,
            ma_window_h: 168,
            ma_k: 3.0,
            iforest_trees: 100,
            iforest_subsample: 256,
            iforest_contamination: 0.10,
            lof_k: 20,
            lof_threshold: 1.5,
            stl_period_h: 168,
            stl_trend_h: 169,
            stl_k: 3.0,
            rating_k: 3.0,
            rating_datum_offset_ft: 0.01,
            roc_quantile: 0.995,
            roc_floor: 0.05,
            roc_min_changes: 24,
            persistence_run_h: 6,
            persistence_q_rel: 0.001,
            persistence_h_ft: 0.001,
            qh_corr_window_h: 24,
            qh_corr_min: 0.2,
            qh_lag_h: 6,
            qh_noise_mult: 3.0,
        }
    }
}

/// Relative floor on residual spreads so exact fits do not flag rounding.
const SPREAD_FLOOR: f64 = 1e-9;

fn both(q: &[f64], h: &[f64], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let (a, b) = (f(q), f(h));
    a.into_iter().zip(b).map(|(x, y)| x.max(y)).collect()
}

fn zscores(x: &[f64]) -> Vec<f64> {
    match mean_std(x) {
        Some((m, s)) if s > 0.0 && x.iter().filter(|v| v.is_finite()).count() >= 2 => x
            .iter()
            .map(|&v| if v.is_finite() { abs(v - m) / s } else { 0.0 })
            .collect(),
        _ => vec![0.0; x.len()],
    }
}

pub fn zscore_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    DetectionResult::from_scores(
        Baseline::Zscore.name(),
        both(q, h, zscores),
        FlagRule::Above(cfg.z_threshold),
    )
}

/// Distance outside `[Q1 - k IQR, Q3 + k IQR]`, in IQR units (raw units
/// when the IQR is zero); 0 inside the closed interval.
fn iqr_excess(x: &[f64], k: f64) -> Vec<f64> {
    let s = sorted_finite(x);
    let (Some(q1), Some(q3)) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75)) else {
        return vec![0.0; x.len()];
    };
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
    let unit = if iqr > 0.0 { iqr } else { 1.0 };
    x.iter()
        .map(|&v| {
            if v.is_finite() {
                (lo - v).max(v - hi).max(0.0) / unit
            } else {
                0.0
            }
        })
        .collect()
}

pub fn iqr_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    let k = cfg.iqr_k;
    DetectionResult::from_scores(
        Baseline::Iqr.name(),
        both(q, h, |x| iqr_excess(x, k)),
        FlagRule::Above(0.0),
    )
}

fn moving_avg_scores(x: &[f64], win: usize) -> Vec<f64> {
    let (before, after) = (win / 2, win - win / 2 - 1);
    (0..x.len())
        .map(|t| {
            if !x[t].is_finite() {
                return 0.0;
            }
            let (a, b) = centered(t, x.len(), before, after);
            match mean_std(&x[a..b]) {
                Some((m, s)) if s > 0.0 => abs(x[t] - m) / s,
                _ => 0.0,
            }
        })
        .collect()
}

pub fn moving_avg_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    let w = cfg.ma_window_h;
    DetectionResult::from_scores(
        Baseline::MovingAvg.name(),
        both(q, h, |x| moving_avg_scores(x, w)),
        FlagRule::Above(cfg.ma_k),
    )
}

fn rolling_median(x: &[f64], before: usize, after: usize) -> Vec<f64> {
    (0..x.len())
        .map(|t| {
            let (a, b) = centered(t, x.len(), before, after);
            median(&x[a..b]).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Two-pass decomposition `x = trend + seasonal + residual`.
pub fn stl_decompose(x: &[f64], period: usize, trend_win: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = trend_win / 2;
    let periodic_mean = |d: &[f64]| -> Vec<f64> {
        let mut sum = vec![0.0; period];
        let mut cnt = vec![0usize; period];
        for (t, &v) in d.iter().enumerate() {
            if v.is_finite() {
                sum[t % period] += v;
                cnt[t % period] += 1;
            }
        }
        let means: Vec<f64> = sum
            .iter()
            .zip(&cnt)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let centre = crate::math::mean(&means).unwrap_or(0.0);
        (0..n).map(|t| means[t % period] - centre).collect()
    };
    let mut seasonal = vec![0.0; n];
    let mut trend = vec![0.0; n];
    for _ in 0..2 {
        let deseason: Vec<f64> = x.iter().zip(&seasonal).map(|(a, s)| a - s).collect();
        trend = rolling_median(&deseason, half, trend_win - half - 1);
        let detrended: Vec<f64> = x.iter().zip(&trend).map(|(a, t)| a - t).collect();
        seasonal = periodic_mean(&detrended);
    }
    let resid = (0..n).map(|t| x[t] - trend[t] - seasonal[t]).collect();
    (trend, seasonal, resid)
}

fn stl_scores(x: &[f64], cfg: &BaselineConfig) -> Vec<f64> {
    let (_, _, r) = stl_decompose(x, cfg.stl_period_h, cfg.stl_trend_h);
    let scale = crate::math::std_dev(x).unwrap_or(0.0).max(1.0);
    let sd = crate::math::std_dev(&r).unwrap_or(0.0).max(SPREAD_FLOOR * scale);
    r.iter()
        .map(|&v| if v.is_finite() { abs(v) / sd } else { 0.0 })
        .collect()
}

pub fn stl_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    DetectionResult::from_scores(
        Baseline::Stl.name(),
        both(q, h, |x| stl_scores(x, cfg)),
        FlagRule::Above(cfg.stl_k),
    )
}

pub fn rating_residual_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    let name = Baseline::RatingResidual.name();
    let Some(fit) = window_rating_theil_sen(h, q, cfg.rating_datum_offset_ft) else {
        return DetectionResult::from_scores(name, vec![0.0; q.len()], FlagRule::Above(cfg.rating_k))
            .warn("within-window rating is degenerate");
    };
    let sd = fit.resid_std.max(SPREAD_FLOOR);
    let scores = q
        .iter()
        .zip(h)
        .map(|(&qq, &hh)| {
            if hh.is_finite() {
                fit.log_residual(hh, qq).map_or(0.0, |r| abs(r) / sd)
            } else {
                0.0
            }
        })
        .collect();
    DetectionResult::from_scores(name, scores, FlagRule::Above(cfg.rating_k))
}

/// Fractional change into each timestep; index 0 and gaps are NaN.
pub fn fractional_changes(x: &[f64]) -> Vec<f64> {
    let mut f = vec![f64::NAN; x.len()];
    for t in 1..x.len() {
        if x[t].is_finite() && x[t - 1].is_finite() {
            f[t] = abs(x[t] - x[t - 1]) / abs(x[t - 1]).max(1e-6);
        }
    }
    f
}

fn roc_scores(x: &[f64], cfg: &BaselineConfig) -> Vec<f64> {
    let f = fractional_changes(x);
    if f.iter().filter(|v| v.is_finite()).count() < cfg.roc_min_changes {
        return vec![0.0; x.len()];
    }
    let theta = quantile(&f, cfg.roc_quantile).unwrap_or(0.0).max(cfg.roc_floor);
    let at = |t: usize| f.get(t).copied().filter(|v| v.is_finite()).unwrap_or(0.0);
    (0..x.len()).map(|t| at(t).max(at(t + 1)) / theta).collect()
}

pub fn rate_of_change_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    DetectionResult::from_scores(
        Baseline::RateOfChange.name(),
        both(q, h, |x| roc_scores(x, cfg)),
        FlagRule::Above(1.0),
    )
}

/// Score is the length in hours of the flat run containing each timestep.
pub fn persistence_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    let n = q.len();
    let still: Vec<bool> = (0..n)
        .map(|t| {
            t > 0
                && [q[t], q[t - 1], h[t], h[t - 1]].iter().all(|v| v.is_finite())
                && abs(q[t] - q[t - 1]) < cfg.persistence_q_rel * abs(q[t - 1]).max(1.0)
                && abs(h[t] - h[t - 1]) < cfg.persistence_h_ft
        })
        .collect();
    let mut scores = vec![1.0; n];
    for (s, e) in crate::math::true_runs(&still) {
        let hours = (e - s + 1) as f64;
        for v in &mut scores[s - 1..e] {
            *v = hours;
        }
    }
    DetectionResult::from_scores(
        Baseline::Persistence.name(),
        scores,
        FlagRule::AtLeast(cfg.persistence_run_h as f64),
    )
}

/// Score `max(corr_min - r_t, mismatch strength - 1)`, flagged above 0.
pub fn qh_consistency_detect(q: &[f64], h: &[f64], cfg: &BaselineConfig) -> DetectionResult {
    let n = q.len();
    let win = cfg.qh_corr_window_h;
    let (before, after) = (win / 2, win - win / 2 - 1);
    let lag = cfg.qh_lag_h;
    let diff = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|t| if t >= lag { x[t] - x[t - lag] } else { f64::NAN })
            .collect()
    };
    let (dq, dh) = (diff(q), diff(h));
    let floor = |d: &[f64], x: &[f64]| {
        let m = crate::math::mad(d).unwrap_or(0.0);
        let scale = crate::math::median(x).map_or(1.0, |v| abs(v).max(1.0));
        (cfg.qh_noise_mult * 1.4826 * m).max(SPREAD_FLOOR * scale)
    };
    let (fq, fh) = (floor(&dq, q), floor(&dh, h));
    let scores = (0..n)
        .map(|t| {
            let (a, b) = centered(t, n, before, after);
            let s1 = pearson(&q[a..b], &h[a..b]).map_or(-1.0, |r| cfg.qh_corr_min - r);
            let s2 = if dq[t].is_finite()
                && dh[t].is_finite()
                && (dq[t] > 0.0) != (dh[t] > 0.0)
                && dq[t] != 0.0
                && dh[t] != 0.0
            {
                (abs(dq[t]) / fq).min(abs(dh[t]) / fh) - 1.0
            } else {
                -1.0
            };
            s1.max(s2)
        })
        .collect();
    DetectionResult::from_scores(Baseline::QhConsistency.name(), scores, FlagRule::Above(0.0))
}

/// Distance outside the month's `[lo, hi]` band in band-width units.
pub fn seasonal_envelope_detect(q: &[f64], h: &[f64], months: &[usize], bands: &MonthlyBands) -> DetectionResult {
    let excess = |x: f64, lo: f64, hi: f64| -> f64 {
        if !x.is_finite() || !lo.is_finite() || !hi.is_finite() {
            return 0.0;
        }
        let unit = if hi > lo { hi - lo } else { 1.0 };
        (lo - x).max(x - hi).max(0.0) / unit
    };
    let scores = (0..q.len())
        .map(|t| {
            let m = months[t];
            excess(q[t], bands.q_lo[m], bands.q_hi[m]).max(excess(h[t], bands.h_lo[m], bands.h_hi[m]))
        })
        .collect();
    DetectionResult::from_scores(Baseline::SeasonalEnvelope.name(), scores, FlagRule::Above(0.0))
}
