// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multi-tier quality control and gap filling.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{abs, exp, ln, median, quantile_sorted};
use crate::rating::{fit_rating_ransac, DatumGrid, RansacConfig};
use crate::series::{is_missing, HourlySeries, QcFlags, MISSING};

pub use crate::rating::RatingFit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcConfig {
    pub outlier_sigma: f64,
    pub roc_percentile: f64,
    pub ransac_iters: usize,
    /// Log-residual inlier threshold (relative).
    pub ransac_inlier_frac: f64,
    pub rating_resid_mult: f64,
    pub q_max_mult: f64,
    pub stage_margin_ft: f64,
    pub linear_fill_max_h: usize,
    pub recession_fill_max_h: usize,
    pub completeness_min: f64,
    pub min_roc_pairs: usize,
    pub min_rating_points: usize,
    pub recession_lookback_h: usize,
    pub min_recession_run_h: usize,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            outlier_sigma: 4.0,
            roc_percentile: 0.99,
            ransac_iters: 1000,
            ransac_inlier_frac: 0.15,
            rating_resid_mult: 2.0,
            q_max_mult: 2.0,
            stage_margin_ft: 1.0,
            linear_fill_max_h: 6,
            recession_fill_max_h: 24,
            completeness_min: 0.90,
            min_roc_pairs: 100,
            min_rating_points: 200,
            recession_lookback_h: 48,
            min_recession_run_h: 6,
        }
    }
}

impl QcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outlier_sigma", self.outlier_sigma),
            ("roc_percentile", self.roc_percentile),
            ("ransac_inlier_frac", self.ransac_inlier_frac),
            ("rating_resid_mult", self.rating_resid_mult),
            ("q_max_mult", self.q_max_mult),
            ("stage_margin_ft", self.stage_margin_ft),
            ("completeness_min", self.completeness_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(alloc::format!("qc.{name} must be positive, got {v}")));
            }
        }
        if self.roc_percentile > 1.0 || self.completeness_min > 1.0 {
            return Err(Error::invalid("qc percentiles and fractions must be at most 1"));
        }
        if self.ransac_iters == 0 || self.linear_fill_max_h == 0 {
            return Err(Error::invalid(
                "qc.ransac_iters and qc.linear_fill_max_h must be positive",
            ));
        }
        if self.linear_fill_max_h >= self.recession_fill_max_h {
            return Err(Error::invalid(
                "qc.linear_fill_max_h must be below qc.recession_fill_max_h",
            ));
        }
        Ok(())
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            iterations: self.ransac_iters,
            inlier_threshold: self.ransac_inlier_frac,
            min_inlier_fraction: 0.5,
            min_points: self.min_rating_points,
            datum_grid: Some(DatumGrid::default()),
            max_score_points: 4096,
        }
    }
}

/// Linear-space monthly means and population standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlyClimatology {
    #[serde(with = "crate::series::missing_array")]
    pub mu_q: [f64; 12],
    #[serde(with = "crate::series::missing_array")]
    pub sigma_q: [f64; 12],
    #[serde(with = "crate::series::missing_array")]
    pub mu_h: [f64; 12],
    #[serde(with = "crate::series::missing_array")]
    pub sigma_h: [f64; 12],
    pub count_q: [usize; 12],
    pub count_h: [usize; 12],
}

impl MonthlyClimatology {
    /// Climatology over present, non-excluded values of each channel.
    pub fn from_series(series: &HourlySeries) -> Self {
        let mut acc = MonthAccumulator::default();
        acc.add(series);
        acc.finish()
    }
}

/// Streaming accumulator for pooled monthly climatologies.
#[derive(Clone, Debug, Default)]
pub struct MonthAccumulator {
    q: [Vec<f64>; 12],
    h: [Vec<f64>; 12],
}

impl MonthAccumulator {
    pub fn add(&mut self, series: &HourlySeries) {
        for k in 0..series.len() {
            if series.flags[k].contains(QcFlags::EXCLUDED) {
                continue;
            }
            let m = series.timestamp(k).month_index();
            if !is_missing(series.discharge[k]) {
                self.q[m].push(series.discharge[k]);
            }
            if !is_missing(series.stage[k]) {
                self.h[m].push(series.stage[k]);
            }
        }
    }

    pub fn finish(&self) -> MonthlyClimatology {
        let mut c = MonthlyClimatology {
            mu_q: [MISSING; 12],
            sigma_q: [MISSING; 12],
            mu_h: [MISSING; 12],
            sigma_h: [MISSING; 12],
            count_q: [0; 12],
            count_h: [0; 12],
        };
        for m in 0..12 {
            c.count_q[m] = self.q[m].len();
            c.count_h[m] = self.h[m].len();
            if let Some((mu, s)) = crate::math::mean_std(&self.q[m]) {
                c.mu_q[m] = mu;
                c.sigma_q[m] = s;
            }
            if let Some((mu, s)) = crate::math::mean_std(&self.h[m]) {
                c.mu_h[m] = mu;
                c.sigma_h[m] = s;
            }
        }
        c
    }
}

/// Outlier flags from the monthly `k`-sigma test on both channels, plus the
/// months that were skipped (no observations or zero spread).
pub fn monthly_outlier_flags(
    series: &HourlySeries,
    clim: &MonthlyClimatology,
    cfg: &QcConfig,
) -> (Vec<bool>, Vec<u32>) {
    let mut skipped = Vec::new();
    for m in 0..12 {
        if clim.count_q[m] == 0 && clim.count_h[m] == 0 {
            continue;
        }
        if !(clim.sigma_q[m] > 0.0) && !(clim.sigma_h[m] > 0.0) {
            skipped.push(m as u32 + 1);
        }
    }
    let month_seen: Vec<bool> = (0..12).map(|m| clim.count_q[m] + clim.count_h[m] > 0).collect();
    let mut flags = vec![false; series.len()];
    for (k, flag) in flags.iter_mut().enumerate() {
        let m = series.timestamp(k).month_index();
        if !month_seen[m] {
            continue;
        }
        let test = |v: f64, mu: f64, s: f64| !is_missing(v) && s > 0.0 && abs(v - mu) > cfg.outlier_sigma * s;
        *flag = test(series.discharge[k], clim.mu_q[m], clim.sigma_q[m])
            || test(series.stage[k], clim.mu_h[m], clim.sigma_h[m]);
    }
    if !skipped.is_empty() {
        log::warn!(
            "{}: outlier test skipped for constant months {:?}",
            series.site_id,
            skipped
        );
    }
    (flags, skipped)
}

/// Fractional discharge changes `|Q_t - Q_{t-1}| / Q_{t-1}` over valid pairs
/// with positive predecessor, indexed by `t`.
pub fn fractional_changes(discharge: &[f64]) -> Vec<(usize, f64)> {
    (1..discharge.len())
        .filter_map(|t| {
            let (a, b) = (discharge[t - 1], discharge[t]);
            (!is_missing(a) && !is_missing(b) && a > 0.0).then(|| (t, abs(b - a) / a))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Site,
    Global,
    Unavailable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateOfChange {
    pub flags: Vec<bool>,
    pub theta: Option<f64>,
    pub source: ThresholdSource,
}

/// Threshold at `percentile` of the fractional changes; `None` if empty.
pub fn roc_threshold(changes: &[f64], percentile: f64) -> Option<f64> {
    quantile_sorted(&crate::math::sorted_finite(changes), percentile)
}

/// Flags timestep `t` when its change from `t - 1` strictly exceeds the
/// site threshold (or `global_theta` when the site has too few pairs).
pub fn rate_of_change_flags(series: &HourlySeries, cfg: &QcConfig, global_theta: Option<f64>) -> RateOfChange {
    let changes = fractional_changes(&series.discharge);
    let (theta, source) = if changes.len() >= cfg.min_roc_pairs {
        let v: Vec<f64> = changes.iter().map(|c| c.1).collect();
        (roc_threshold(&v, cfg.roc_percentile), ThresholdSource::Site)
    } else if global_theta.is_some() {
        (global_theta, ThresholdSource::Global)
    } else {
        log::warn!(
            "{}: {} change pairs and no global threshold; rate check skipped",
            series.site_id,
            changes.len()
        );
        (None, ThresholdSource::Unavailable)
    };
    let mut flags = vec![false; series.len()];
    if let Some(th) = theta {
        for &(t, c) in &changes {
            flags[t] = c > th;
        }
    }
    RateOfChange { flags, theta, source }
}

/// Rating fit over valid `(H, Q)` pairs with `Q > 0`.
pub fn fit_rating<R: Rng + ?Sized>(series: &HourlySeries, cfg: &QcConfig, rng: &mut R) -> Result<RatingFit> {
    let (h, q): (Vec<f64>, Vec<f64>) = (0..series.len())
        .filter(|&k| series.is_valid(k))
        .map(|k| (series.stage[k], series.discharge[k]))
        .unzip();
    fit_rating_ransac(&h, &q, &cfg.ransac(), rng)
}

/// Floor applied to the residual spread so exact fits do not flag rounding.
pub const RESID_STD_FLOOR: f64 = 1e-9;

/// Implausible flags for rating deviations beyond `mult * resid_std` and for
/// stage at or below the datum. Zero discharge has no log residual and is
/// left to the range check.
pub fn rating_flags(series: &HourlySeries, fit: &RatingFit, cfg: &QcConfig) -> Vec<bool> {
    let limit = cfg.rating_resid_mult * fit.resid_std.max(RESID_STD_FLOOR);
    (0..series.len())
        .map(|k| {
            let (h, q) = (series.stage[k], series.discharge[k]);
            if is_missing(h) {
                return false;
            }
            if h <= fit.h0 {
                return true;
            }
            if is_missing(q) || q <= 0.0 {
                return false;
            }
            fit.log_residual(h, q).is_some_and(|r| abs(r) > limit)
        })
        .collect()
}

/// Reference extrema for the range check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExtrema {
    pub q_max: f64,
    pub h_min: f64,
    pub h_max: f64,
}

impl TrainingExtrema {
    pub fn from_series(series: &HourlySeries) -> Option<Self> {
        let q_max = crate::math::finite(&series.discharge).fold(f64::NEG_INFINITY, f64::max);
        let h_min = crate::math::finite(&series.stage).fold(f64::INFINITY, f64::min);
        let h_max = crate::math::finite(&series.stage).fold(f64::NEG_INFINITY, f64::max);
        (q_max.is_finite() && h_min.is_finite()).then_some(TrainingExtrema { q_max, h_min, h_max })
    }
}

/// Flags `Q` outside `[0, mult * Q_max]` and `H` outside the extrema widened
/// by the stage margin (both closed).
pub fn range_flags(series: &HourlySeries, ext: &TrainingExtrema, cfg: &QcConfig) -> Vec<bool> {
    let q_hi = cfg.q_max_mult * ext.q_max;
    let (h_lo, h_hi) = (ext.h_min - cfg.stage_margin_ft, ext.h_max + cfg.stage_margin_ft);
    (0..series.len())
        .map(|k| {
            let (q, h) = (series.discharge[k], series.stage[k]);
            (!is_missing(q) && (q < 0.0 || q > q_hi)) || (!is_missing(h) && (h < h_lo || h > h_hi))
        })
        .collect()
}

/// Recession constant from the longest strictly-positive run in the lookback
/// window before `gap_start`; falls back to `site_median` when that run is
/// shorter than the minimum. Negative estimates clamp to zero.
pub fn estimate_recession_k(
    discharge: &[f64],
    gap_start: usize,
    site_median: Option<f64>,
    cfg: &QcConfig,
) -> Option<f64> {
    let lo = gap_start.saturating_sub(cfg.recession_lookback_h);
    let mut best: Option<(usize, usize)> = None;
    let mut run_start = None;
    for t in lo..=gap_start.min(discharge.len()) {
        let ok = t < gap_start && !is_missing(discharge[t]) && discharge[t] > 0.0;
        match (ok, run_start) {
            (true, None) => run_start = Some(t),
            (false, Some(s)) => {
                if best.map_or(true, |(bs, be)| t - s > be - bs) {
                    best = Some((s, t));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let k = match best {
        Some((s, e)) if e - s >= cfg.min_recession_run_h => {
            let dt = (e - 1 - s) as f64;
            -ln(discharge[e - 1] / discharge[s]) / dt
        }
        _ => site_median?,
    };
    Some(k.max(0.0))
}

/// Median recession constant over all segments of at least the minimum
/// length with strictly declining discharge.
pub fn site_median_recession_k(discharge: &[f64], cfg: &QcConfig) -> Option<f64> {
    let mut ks = Vec::new();
    let mut s = 0usize;
    let n = discharge.len();
    while s < n {
        if is_missing(discharge[s]) || discharge[s] <= 0.0 {
            s += 1;
            continue;
        }
        let mut e = s + 1;
        while e < n && !is_missing(discharge[e]) && discharge[e] > 0.0 && discharge[e] < discharge[e - 1] {
            e += 1;
        }
        if e - s >= cfg.min_recession_run_h {
            ks.push(-ln(discharge[e - 1] / discharge[s]) / (e - 1 - s) as f64);
        }
        s = e;
    }
    median(&ks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillStats {
    pub gap_hours: usize,
    pub linear_hours: usize,
    pub recession_hours: usize,
    pub excluded_hours: usize,
    pub linear_gaps: usize,
    pub recession_gaps: usize,
    pub excluded_gaps: usize,
    /// Flagged timesteps converted to gaps before filling.
    pub converted_hours: usize,
}

/// Maximal runs of timesteps missing at least one channel.
pub fn gap_runs(series: &HourlySeries) -> Vec<(usize, usize)> {
    let missing: Vec<bool> = (0..series.len())
        .map(|k| is_missing(series.discharge[k]) || is_missing(series.stage[k]))
        .collect();
    crate::math::true_runs(&missing)
}

/// Fills gaps by length class. Outlier/implausible timesteps become gaps
/// first; gaps touching either end of the record have no bounding value and
/// are excluded. Observed values are never overwritten.
pub fn fill_gaps(series: &HourlySeries, cfg: &QcConfig) -> (HourlySeries, FillStats) {
    let mut out = series.clone();
    let mut stats = FillStats::default();
    for k in 0..out.len() {
        if out.flags[k].intersects(QcFlags::OUTLIER | QcFlags::IMPLAUSIBLE) {
            out.discharge[k] = MISSING;
            out.stage[k] = MISSING;
            stats.converted_hours += 1;
        }
    }
    let site_k = site_median_recession_k(&out.discharge, cfg);
    let n = out.len();
    for (s, e) in gap_runs(&out) {
        let len = e - s;
        stats.gap_hours += len;
        let bounded = s > 0 && e < n;
        let class = if !bounded || len > cfg.recession_fill_max_h {
            None
        } else if len <= cfg.linear_fill_max_h {
            Some(QcFlags::FILLED_LINEAR)
        } else {
            estimate_recession_k(&out.discharge, s, site_k, cfg).map(|_| QcFlags::FILLED_RECESSION)
        };
        match class {
            None => {
                for k in s..e {
                    out.flags[k].insert(QcFlags::EXCLUDED);
                }
                stats.excluded_hours += len;
                stats.excluded_gaps += 1;
            }
            Some(flag) => {
                let (l, r) = (s - 1, e);
                let k_rec = if flag == QcFlags::FILLED_RECESSION {
                    estimate_recession_k(&out.discharge, s, site_k, cfg)
                } else {
                    None
                };
                let span = (r - l) as f64;
                for t in s..e {
                    let frac = (t - l) as f64 / span;
                    if is_missing(out.discharge[t]) {
                        out.discharge[t] = match k_rec {
                            Some(k) => out.discharge[l] * exp(-k * (t - l) as f64),
                            None => out.discharge[l] + (out.discharge[r] - out.discharge[l]) * frac,
                        };
                    }
                    if is_missing(out.stage[t]) {
                        out.stage[t] = out.stage[l] + (out.stage[r] - out.stage[l]) * frac;
                    }
                    out.flags[t].insert(flag);
                }
                if flag == QcFlags::FILLED_LINEAR {
                    stats.linear_hours += len;
                    stats.linear_gaps += 1;
                } else {
                    stats.recession_hours += len;
                    stats.recession_gaps += 1;
                }
            }
        }
    }
    (out, stats)
}

/// Fraction of timesteps with both channels present and not excluded.
pub fn completeness(series: &HourlySeries) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    series.valid_count() as f64 / series.len() as f64
}

pub fn completeness_filter(series: &HourlySeries, cfg: &QcConfig) -> bool {
    completeness(series) >= cfg.completeness_min
}

/// Per-site context that comes from outside the site's own record.
#[derive(Clone, Debug, Default)]
pub struct QcContext {
    pub global_theta: Option<f64>,
    pub extrema: Option<TrainingExtrema>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlagCounts {
    pub outlier: usize,
    pub implausible: usize,
    pub filled_linear: usize,
    pub filled_recession: usize,
    pub excluded: usize,
}

impl FlagCounts {
    pub fn of(flags: &[QcFlags]) -> Self {
        let mut c = FlagCounts::default();
        for f in flags {
            c.outlier += usize::from(f.contains(QcFlags::OUTLIER));
            c.implausible += usize::from(f.contains(QcFlags::IMPLAUSIBLE));
            c.filled_linear += usize::from(f.contains(QcFlags::FILLED_LINEAR));
            c.filled_recession += usize::from(f.contains(QcFlags::FILLED_RECESSION));
            c.excluded += usize::from(f.contains(QcFlags::EXCLUDED));
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub site_id: String,
    pub flags: FlagCounts,
    pub fills: FillStats,
    pub roc_theta: Option<f64>,
    pub roc_source: ThresholdSource,
    pub rating: Option<RatingFit>,
    pub skipped_months: Vec<u32>,
    pub completeness: f64,
    pub accepted: bool,
    pub warnings: Vec<String>,
}

/// Full per-site protocol: monthly outliers, rate of change, rating
/// consistency, range bounds, then gap filling and the completeness test.
pub fn run_qc<R: Rng + ?Sized>(
    series: &HourlySeries,
    cfg: &QcConfig,
    ctx: &QcContext,
    rng: &mut R,
) -> (HourlySeries, QcReport) {
    let mut flagged = series.clone();
    let mut warnings = Vec::new();
    let n = series.len();

    let clim = MonthlyClimatology::from_series(series);
    let (outliers, skipped_months) = monthly_outlier_flags(series, &clim, cfg);
    let roc = rate_of_change_flags(series, cfg, ctx.global_theta);
    if roc.source == ThresholdSource::Unavailable {
        warnings.push(String::from("rate-of-change threshold unavailable"));
    }
    let rating = match fit_rating(series, cfg, rng) {
        Ok(fit) => Some(fit),
        Err(e) => {
            log::warn!("{}: rating checks skipped: {e}", series.site_id);
            warnings.push(alloc::format!("rating fit: {e}"));
            None
        }
    };
    let rating_bad = rating.as_ref().map(|f| rating_flags(series, f, cfg));
    let extrema = ctx.extrema.or_else(|| TrainingExtrema::from_series(series));
    let range_bad = extrema.map(|e| range_flags(series, &e, cfg));

    for k in 0..n {
        if outliers[k] {
            flagged.flags[k].insert(QcFlags::OUTLIER);
        }
        let implausible =
            roc.flags[k] || rating_bad.as_ref().is_some_and(|v| v[k]) || range_bad.as_ref().is_some_and(|v| v[k]);
        if implausible {
            flagged.flags[k].insert(QcFlags::IMPLAUSIBLE);
        }
    }
    let (filled, fills) = fill_gaps(&flagged, cfg);
    let completeness = completeness(&filled);
    let accepted = completeness >= cfg.completeness_min;
    let report = QcReport {
        site_id: series.site_id.clone(),
        flags: FlagCounts::of(&filled.flags),
        fills,
        roc_theta: roc.theta,
        roc_source: roc.source,
        rating,
        skipped_months,
        completeness,
        accepted,
        warnings,
    };
    (filled, report)
}

/// Rate threshold pooled over the fractional changes of many sites.
pub fn pooled_roc_theta<'a>(sites: impl IntoIterator<Item = &'a HourlySeries>, cfg: &QcConfig) -> Option<f64> {
    let pooled: Vec<f64> = sites
        .into_iter()
        .flat_map(|s| fractional_changes(&s.discharge).into_iter().map(|c| c.1))
        .collect();
    roc_threshold(&pooled, cfg.roc_percentile)
}
