// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hierarchical normalization (log, per-site standardization, clipping),
//! its exact inverse, and the 12-channel feature builder.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{average_ranks, exp, ln, mean_std, quantile_sorted, sqrt};
use crate::qc::{MonthAccumulator, MonthlyClimatology};
use crate::series::{is_missing, HourlySeries, Partition, QcFlags, SiteMeta, MISSING};
use crate::time::Timestamp;
use crate::window::{channel, Window, WindowNorm, N_FEATURES, WINDOW_LEN};

/// How the fallback log-space spread is pooled over training sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalSigmaRule {
    /// Spread of the equal-weight mixture of site distributions:
    /// `sqrt(mean_s(sigma_s^2 + (mu_s - mu_global)^2))`.
    #[default]
    Mixture,
    /// Mean of per-site spreads.
    MeanOfSites,
    /// Standard deviation of per-site spreads, read literally.
    StdOfSites,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub epsilon: f64,
    pub clip_tau: f64,
    pub global_sigma: GlobalSigmaRule,
    pub min_valid_hours: usize,
    pub envelope_lo: f64,
    pub envelope_hi: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            epsilon: 1e-8,
            clip_tau: 3.0,
            global_sigma: GlobalSigmaRule::Mixture,
            min_valid_hours: 720,
            envelope_lo: 0.01,
            envelope_hi: 0.99,
        }
    }
}

impl NormConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.clip_tau > 0.0) {
            return Err(Error::invalid("norm.epsilon and norm.clip_tau must be positive"));
        }
        if !(0.0 <= self.envelope_lo && self.envelope_lo < self.envelope_hi && self.envelope_hi <= 1.0) {
            return Err(Error::invalid("norm envelope quantiles must satisfy 0 <= lo < hi <= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    SiteSpecific,
    GlobalFallback,
}

/// Monthly `[lo, hi]` percentile bands of linear discharge and stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthlyBands {
    #[serde(with = "crate::series::missing_array")]
    pub q_lo: [f64; 12],
    #[serde(with = "crate::series::missing_array")]
    pub q_hi: [f64; 12],
    #[serde(with = "crate::series::missing_array")]
    pub h_lo: [f64; 12],
    #[serde(with = "crate::series::missing_array")]
    pub h_hi: [f64; 12],
}

impl MonthlyBands {
    fn from_months(q: &[Vec<f64>; 12], h: &[Vec<f64>; 12], lo: f64, hi: f64) -> Self {
        let mut b = MonthlyBands {
            q_lo: [MISSING; 12],
            q_hi: [MISSING; 12],
            h_lo: [MISSING; 12],
            h_hi: [MISSING; 12],
        };
        for m in 0..12 {
            let sq = crate::math::sorted_finite(&q[m]);
            let sh = crate::math::sorted_finite(&h[m]);
            b.q_lo[m] = quantile_sorted(&sq, lo).unwrap_or(MISSING);
            b.q_hi[m] = quantile_sorted(&sq, hi).unwrap_or(MISSING);
            b.h_lo[m] = quantile_sorted(&sh, lo).unwrap_or(MISSING);
            b.h_hi[m] = quantile_sorted(&sh, hi).unwrap_or(MISSING);
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub site_id: String,
    pub mu_ln_q: f64,
    pub sigma_ln_q: f64,
    pub mu_ln_h: f64,
    pub sigma_ln_h: f64,
    pub climatology: MonthlyClimatology,
    pub envelope: MonthlyBands,
    pub rank_area: f64,
    pub rank_elev: f64,
    pub source: StatsSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mu_ln_q: f64,
    pub sigma_ln_q: f64,
    pub mu_ln_h: f64,
    pub sigma_ln_h: f64,
    /// Means and population spreads of latitude, longitude, drainage area, elevation.
    pub static_mean: [f64; 4],
    pub static_std: [f64; 4],
    pub climatology: MonthlyClimatology,
    pub envelope: MonthlyBands,
    pub train_areas: Vec<f64>,
    pub train_elevations: Vec<f64>,
    pub n_sites: usize,
    pub sigma_rule: GlobalSigmaRule,
}

/// Output of the one-shot fit over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedStats {
    pub sites: BTreeMap<String, SiteStats>,
    pub global: GlobalStats,
    pub dropped: Vec<(String, String)>,
}

impl FittedStats {
    /// Site-specific stats for fitted training sites, global fallback otherwise.
    pub fn stats_for(&self, meta: &SiteMeta) -> SiteStats {
        match self.sites.get(&meta.site_id) {
            Some(s) => s.clone(),
            None => fallback_stats(meta, &self.global),
        }
    }
}

/// Per-site log-space moments over valid timesteps with non-negative values.
fn log_moments(values: &[f64], valid: &[bool], eps: f64) -> Option<(f64, f64)> {
    let logs: Vec<f64> = values
        .iter()
        .zip(valid)
        .filter(|(v, ok)| **ok && **v >= 0.0)
        .map(|(v, _)| ln(v + eps))
        .collect();
    mean_std(&logs)
}

fn valid_mask(s: &HourlySeries) -> Vec<bool> {
    (0..s.len()).map(|k| s.is_valid(k)).collect()
}

fn month_values(series: &HourlySeries) -> ([Vec<f64>; 12], [Vec<f64>; 12]) {
    let mut q: [Vec<f64>; 12] = Default::default();
    let mut h: [Vec<f64>; 12] = Default::default();
    for k in 0..series.len() {
        if series.flags[k].contains(QcFlags::EXCLUDED) {
            continue;
        }
        let m = series.timestamp(k).month_index();
        if !is_missing(series.discharge[k]) {
            q[m].push(series.discharge[k]);
        }
        if !is_missing(series.stage[k]) {
            h[m].push(series.stage[k]);
        }
    }
    (q, h)
}

fn pool_sigma(rule: GlobalSigmaRule, moments: &[(f64, f64)]) -> (f64, f64) {
    let n = moments.len() as f64;
    let mu = moments.iter().map(|m| m.0).sum::<f64>() / n;
    let sigmas: Vec<f64> = moments.iter().map(|m| m.1).collect();
    let sigma = match rule {
        GlobalSigmaRule::Mixture => sqrt(moments.iter().map(|(m, s)| s * s + (m - mu) * (m - mu)).sum::<f64>() / n),
        GlobalSigmaRule::MeanOfSites => sigmas.iter().sum::<f64>() / n,
        GlobalSigmaRule::StdOfSites => crate::math::std_dev(&sigmas).unwrap_or(0.0),
    };
    (mu, sigma)
}

fn statics(meta: &SiteMeta) -> [f64; 4] {
    [meta.latitude, meta.longitude, meta.drainage_area_km2, meta.elevation_m]
}

/// Fits per-site and global statistics from training-partition sites only;
/// sites in any other partition are ignored here.
pub fn fit_site_stats(corpus: &[(&SiteMeta, &HourlySeries)], cfg: &NormConfig) -> Result<FittedStats> {
    cfg.validate()?;
    let mut dropped = Vec::new();
    struct Fit<'a> {
        meta: &'a SiteMeta,
        series: &'a HourlySeries,
        q: (f64, f64),
        h: (f64, f64),
    }
    let mut fits = Vec::new();
    for (meta, series) in corpus.iter().filter(|(m, _)| m.partition == Partition::Train) {
        let valid = valid_mask(series);
        let n_valid = valid.iter().filter(|v| **v).count();
        if n_valid < cfg.min_valid_hours {
            log::warn!("{}: {} valid hours, stats rejected", meta.site_id, n_valid);
            dropped.push((meta.site_id.clone(), alloc::format!("{n_valid} valid hours")));
            continue;
        }
        match (
            log_moments(&series.discharge, &valid, cfg.epsilon),
            log_moments(&series.stage, &valid, cfg.epsilon),
        ) {
            (Some(q), Some(h)) => fits.push(Fit { meta, series, q, h }),
            _ => dropped.push((meta.site_id.clone(), String::from("no non-negative values"))),
        }
    }
    if fits.is_empty() {
        return Err(Error::insufficient("no training site has usable statistics"));
    }

    let qm: Vec<(f64, f64)> = fits.iter().map(|f| f.q).collect();
    let hm: Vec<(f64, f64)> = fits.iter().map(|f| f.h).collect();
    let (mu_ln_q, sigma_ln_q) = pool_sigma(cfg.global_sigma, &qm);
    let (mu_ln_h, sigma_ln_h) = pool_sigma(cfg.global_sigma, &hm);

    let mut static_mean = [0.0; 4];
    let mut static_std = [0.0; 4];
    for c in 0..4 {
        let v: Vec<f64> = fits.iter().map(|f| statics(f.meta)[c]).collect();
        let (m, s) = mean_std(&v).unwrap_or((0.0, 0.0));
        static_mean[c] = m;
        static_std[c] = s;
    }

    let areas: Vec<f64> = fits.iter().map(|f| f.meta.drainage_area_km2).collect();
    let elevs: Vec<f64> = fits.iter().map(|f| f.meta.elevation_m).collect();
    let rank_a = normalized_ranks(&areas);
    let rank_e = normalized_ranks(&elevs);

    let mut pooled_acc = MonthAccumulator::default();
    let mut pooled_q: [Vec<f64>; 12] = Default::default();
    let mut pooled_h: [Vec<f64>; 12] = Default::default();
    let mut sites = BTreeMap::new();
    for (i, f) in fits.iter().enumerate() {
        pooled_acc.add(f.series);
        let (mq, mh) = month_values(f.series);
        let envelope = MonthlyBands::from_months(&mq, &mh, cfg.envelope_lo, cfg.envelope_hi);
        for m in 0..12 {
            pooled_q[m].extend_from_slice(&mq[m]);
            pooled_h[m].extend_from_slice(&mh[m]);
        }
        sites.insert(
            f.meta.site_id.clone(),
            SiteStats {
                site_id: f.meta.site_id.clone(),
                mu_ln_q: f.q.0,
                sigma_ln_q: f.q.1,
                mu_ln_h: f.h.0,
                sigma_ln_h: f.h.1,
                climatology: MonthlyClimatology::from_series(f.series),
                envelope,
                rank_area: rank_a[i],
                rank_elev: rank_e[i],
                source: StatsSource::SiteSpecific,
            },
        );
    }
    let mut train_areas = areas;
    train_areas.sort_by(f64::total_cmp);
    let mut train_elevations = elevs;
    train_elevations.sort_by(f64::total_cmp);

    let global = GlobalStats {
        mu_ln_q,
        sigma_ln_q,
        mu_ln_h,
        sigma_ln_h,
        static_mean,
        static_std,
        climatology: pooled_acc.finish(),
        envelope: MonthlyBands::from_months(&pooled_q, &pooled_h, cfg.envelope_lo, cfg.envelope_hi),
        train_areas,
        train_elevations,
        n_sites: fits.len(),
        sigma_rule: cfg.global_sigma,
    };
    Ok(FittedStats { sites, global, dropped })
}

/// Average ordinal ranks mapped onto `[0, 1]`.
pub fn normalized_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n <= 1 {
        return alloc::vec![0.0; n];
    }
    average_ranks(values)
        .into_iter()
        .map(|r| (r - 1.0) / (n - 1) as f64)
        .collect()
}

/// Rank of a value unseen in the sorted training values, interpolated
/// between neighbouring order statistics and clamped to `[0, 1]`.
pub fn interpolated_rank(sorted: &[f64], v: f64) -> f64 {
    let n = sorted.len();
    if n <= 1 || !v.is_finite() {
        return 0.0;
    }
    if v <= sorted[0] {
        return 0.0;
    }
    if v >= sorted[n - 1] {
        return 1.0;
    }
    let i = sorted.partition_point(|x| *x <= v) - 1;
    let (lo, hi) = (sorted[i], sorted[i + 1]);
    let frac = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    ((i as f64 + frac) / (n - 1) as f64).clamp(0.0, 1.0)
}

/// Statistics for a site absent from the training partition.
pub fn fallback_stats(meta: &SiteMeta, g: &GlobalStats) -> SiteStats {
    SiteStats {
        site_id: meta.site_id.clone(),
        mu_ln_q: g.mu_ln_q,
        sigma_ln_q: g.sigma_ln_q,
        mu_ln_h: g.mu_ln_h,
        sigma_ln_h: g.sigma_ln_h,
        climatology: g.climatology.clone(),
        envelope: g.envelope.clone(),
        rank_area: interpolated_rank(&g.train_areas, meta.drainage_area_km2),
        rank_elev: interpolated_rank(&g.train_elevations, meta.elevation_m),
        source: StatsSource::GlobalFallback,
    }
}

/// Log, standardize, clip.
pub fn normalize(value: f64, mu: f64, sigma: f64, cfg: &NormConfig) -> Result<f64> {
    if value < 0.0 {
        return Err(Error::Negative { value });
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "normalize",
            value,
        });
    }
    Ok(standardize_log(value, mu, sigma, cfg).clamp(-cfg.clip_tau, cfg.clip_tau))
}

/// Tiers one and two without clipping.
pub fn standardize_log(value: f64, mu: f64, sigma: f64, cfg: &NormConfig) -> f64 {
    (ln(value + cfg.epsilon) - mu) / (sigma + cfg.epsilon)
}

/// Exact inverse of tiers one and two; never clips.
pub fn denormalize(y: f64, mu: f64, sigma: f64, cfg: &NormConfig) -> Result<f64> {
    let v = exp(y * (sigma + cfg.epsilon) + mu) - cfg.epsilon;
    if !v.is_finite() {
        return Err(Error::Overflow { value: y });
    }
    Ok(v)
}

/// Standardization of a never-logged static field.
pub fn standardize_static(value: f64, mean: f64, std: f64, cfg: &NormConfig) -> f64 {
    (value - mean) / (std + cfg.epsilon)
}

pub fn unstandardize_static(y: f64, mean: f64, std: f64, cfg: &NormConfig) -> f64 {
    y * (std + cfg.epsilon) + mean
}

impl SiteStats {
    pub fn normalize_q(&self, q: f64, cfg: &NormConfig) -> Result<f64> {
        normalize(q, self.mu_ln_q, self.sigma_ln_q, cfg)
    }

    pub fn normalize_h(&self, h: f64, cfg: &NormConfig) -> Result<f64> {
        normalize(h, self.mu_ln_h, self.sigma_ln_h, cfg)
    }

    pub fn denormalize_q(&self, y: f64, cfg: &NormConfig) -> Result<f64> {
        denormalize(y, self.mu_ln_q, self.sigma_ln_q, cfg)
    }

    pub fn denormalize_h(&self, y: f64, cfg: &NormConfig) -> Result<f64> {
        denormalize(y, self.mu_ln_h, self.sigma_ln_h, cfg)
    }
}

fn seasonal_anomaly(v: f64, mu: f64, sigma: f64, tau: f64) -> f64 {
    if is_missing(v) || is_missing(mu) || !(sigma > 0.0) {
        0.0
    } else {
        ((v - mu) / sigma).clamp(-tau, tau)
    }
}

/// Builds a window from physical discharge/stage slices. Missing values
/// normalize to zero and clear the observation mask.
pub fn build_features(
    discharge: &[f64],
    stage: &[f64],
    start: Timestamp,
    meta: &SiteMeta,
    stats: &SiteStats,
    global: &GlobalStats,
    cfg: &NormConfig,
) -> Result<Window> {
    if discharge.len() != WINDOW_LEN || stage.len() != WINDOW_LEN {
        return Err(Error::invalid(alloc::format!(
            "window needs {WINDOW_LEN} steps, got {} / {}",
            discharge.len(),
            stage.len()
        )));
    }
    let st = statics(meta);
    let mut row = [0.0; N_FEATURES];
    for c in 0..4 {
        row[c] = standardize_static(st[c], global.static_mean[c], global.static_std[c], cfg);
    }
    row[channel::SIGMA_LN_Q] = stats.sigma_ln_q;
    row[channel::SIGMA_LN_H] = stats.sigma_ln_h;
    row[channel::RANK_AREA] = stats.rank_area;
    row[channel::RANK_ELEVATION] = stats.rank_elev;
    let mut w = Window {
        site_id: meta.site_id.clone(),
        start,
        features: alloc::vec![row; WINDOW_LEN],
        discharge: discharge.to_vec(),
        stage: stage.to_vec(),
        observation_mask: alloc::vec![true; WINDOW_LEN],
        norm: WindowNorm {
            mu_ln_q: stats.mu_ln_q,
            sigma_ln_q: stats.sigma_ln_q,
            mu_ln_h: stats.mu_ln_h,
            sigma_ln_h: stats.sigma_ln_h,
            epsilon: cfg.epsilon,
            clip_tau: cfg.clip_tau,
        },
    };
    if let Some(bad) = discharge.iter().chain(stage).find(|v| **v < 0.0) {
        return Err(Error::Negative { value: *bad });
    }
    refresh_dynamic_channels(&mut w, &stats.climatology);
    Ok(w)
}

/// Recomputes the normalized and seasonal channels from the window's
/// physical traces using the window's own normalization parameters.
pub fn refresh_dynamic_channels(w: &mut Window, clim: &MonthlyClimatology) {
    let norm = w.norm;
    for k in 0..w.len() {
        let (q, h) = (w.discharge[k], w.stage[k]);
        let m = w.start.plus_hours(k as i64).month_index();
        w.observation_mask[k] = !is_missing(q) && !is_missing(h);
        let row = &mut w.features[k];
        row[channel::DISCHARGE] = if is_missing(q) { 0.0 } else { norm.q_to_normalized(q) };
        row[channel::STAGE] = if is_missing(h) { 0.0 } else { norm.h_to_normalized(h) };
        row[channel::SEASONAL_Q] = seasonal_anomaly(q, clim.mu_q[m], clim.sigma_q[m], norm.clip_tau);
        row[channel::SEASONAL_H] = seasonal_anomaly(h, clim.mu_h[m], clim.sigma_h[m], norm.clip_tau);
    }
}

/// Windows for every span of a series.
pub fn build_windows(
    series: &HourlySeries,
    spans: &[crate::window::WindowSpan],
    meta: &SiteMeta,
    stats: &SiteStats,
    global: &GlobalStats,
    cfg: &NormConfig,
) -> Result<Vec<Window>> {
    spans
        .iter()
        .map(|sp| {
            let r = sp.offset..sp.offset + WINDOW_LEN;
            build_features(
                &series.discharge[r.clone()],
                &series.stage[r],
                sp.start,
                meta,
                stats,
                global,
                cfg,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn meta(id: &str, area: f64, part: Partition) -> SiteMeta {
        SiteMeta {
            site_id: id.into(),
            latitude: 40.0,
            longitude: -100.0,
            drainage_area_km2: area,
            elevation_m: area / 10.0,
            partition: part,
        }
    }

    fn flat(q: f64, h: f64, n: usize) -> HourlySeries {
        HourlySeries::new("x", Timestamp(0), vec![q; n], vec![h; n]).unwrap()
    }

    #[test]
    fn constant_site_has_zero_sigma() {
        let m = meta("a", 10.0, Partition::Train);
        let s = flat(5.0, 2.0, 800);
        let fit = fit_site_stats(&[(&m, &s)], &NormConfig::default()).unwrap();
        let st = &fit.sites["a"];
        assert!((st.mu_ln_q - ln(5.0 + 1e-8)).abs() < 1e-12);
        assert_eq!(st.sigma_ln_q, 0.0);
    }

    #[test]
    fn two_site_ranks() {
        let (a, b) = (meta("a", 10.0, Partition::Train), meta("b", 100.0, Partition::Train));
        let s = flat(5.0, 2.0, 800);
        let fit = fit_site_stats(&[(&a, &s), (&b, &s)], &NormConfig::default()).unwrap();
        assert_eq!(fit.sites["a"].rank_area, 0.0);
        assert_eq!(fit.sites["b"].rank_area, 1.0);
        let unseen = meta("c", 55.0, Partition::Test);
        let st = fit.stats_for(&unseen);
        assert_eq!(st.source, StatsSource::GlobalFallback);
        assert!((st.rank_area - 0.5).abs() < 1e-12);
        assert_eq!(fit.stats_for(&meta("d", 1e6, Partition::Test)).rank_area, 1.0);
    }

    #[test]
    fn short_site_is_dropped() {
        let (a, b) = (meta("a", 10.0, Partition::Train), meta("b", 100.0, Partition::Train));
        let (sa, sb) = (flat(5.0, 2.0, 800), flat(5.0, 2.0, 719));
        let fit = fit_site_stats(&[(&a, &sa), (&b, &sb)], &NormConfig::default()).unwrap();
        assert_eq!(fit.dropped.len(), 1);
        assert!(!fit.sites.contains_key("b"));
    }

    #[test]
    fn population_std_of_three() {
        let v = [0.0, 1.0, 2.0];
        let (m, s) = mean_std(&v).unwrap();
        assert_eq!(m, 1.0);
        assert!((s - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let c = NormConfig::default();
        let mu = 2.0;
        assert!(normalize(exp(mu) - 1e-8, mu, 0.5, &c).unwrap().abs() < 1e-9);
        assert_eq!(normalize(exp(mu + 5.0), mu, 1.0, &c).unwrap(), 3.0);
        let v = normalize(exp(3.0) - 1e-8, 2.0, 0.5, &c).unwrap();
        assert!((v - 1.0 / (0.5 + 1e-8)).abs() < 1e-9);
        assert!(normalize(-1.0, 0.0, 1.0, &c).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let c = NormConfig::default();
        assert!((denormalize(0.0, 2.0, 0.5, &c).unwrap() - (exp(2.0) - 1e-8)).abs() < 1e-12);
        let d = denormalize(4.0, 1.0, 0.5, &c).unwrap();
        assert!((d - (exp(4.0 * (0.5 + 1e-8) + 1.0) - 1e-8)).abs() < 1e-9);
        assert!(matches!(denormalize(1e6, 0.0, 1.0, &c), Err(Error::Overflow { .. })));
        let y = denormalize(4.0, 0.0, 1.0, &c).unwrap();
        assert_eq!(normalize(y, 0.0, 1.0, &c).unwrap(), 3.0);
    }

    #[test]
    fn global_sigma_rules() {
        let m = [(0.0, 1.0), (2.0, 1.0)];
        let (mu, s) = pool_sigma(GlobalSigmaRule::Mixture, &m);
        assert_eq!(mu, 1.0);
        assert!((s - sqrt(2.0)).abs() < 1e-12);
        assert_eq!(pool_sigma(GlobalSigmaRule::MeanOfSites, &m).1, 1.0);
        assert_eq!(pool_sigma(GlobalSigmaRule::StdOfSites, &m).1, 0.0);
    }

    #[test]
    fn features_layout() {
        let a = meta("a", 10.0, Partition::Train);
        let b = meta("b", 100.0, Partition::Train);
        let q: Vec<f64> = (0..1000).map(|i| 10.0 + (i % 37) as f64).collect();
        let h: Vec<f64> = (0..1000).map(|i| 2.0 + (i % 11) as f64 * 0.1).collect();
        let s = HourlySeries::new("a", Timestamp(0), q.clone(), h.clone()).unwrap();
        let fit = fit_site_stats(&[(&a, &s), (&b, &s)], &NormConfig::default()).unwrap();
        let st = fit.stats_for(&a);
        let w = build_features(
            &q[..576],
            &h[..576],
            Timestamp(0),
            &a,
            &st,
            &fit.global,
            &NormConfig::default(),
        )
        .unwrap();
        for c in [0, 1, 2, 3, 6, 7, 8, 9] {
            let ch = w.channel(c);
            assert!(ch.iter().all(|v| *v == ch[0]), "channel {c} not constant");
        }
        assert_eq!(w.features[0][channel::SIGMA_LN_Q], st.sigma_ln_q);
        let jan = st.climatology.mu_q[0];
        let mut q2 = q[..576].to_vec();
        q2[5] = jan;
        let w2 = build_features(
            &q2,
            &h[..576],
            Timestamp(0),
            &a,
            &st,
            &fit.global,
            &NormConfig::default(),
        )
        .unwrap();
        assert_eq!(w2.features[5][channel::SEASONAL_Q], 0.0);
    }
}
