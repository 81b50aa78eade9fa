// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic corpora: site tables, hourly hydrographs with gaps, and
//! raw/corrected archive pairs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{exp, ln, powf, round, sin};
use crate::rng::{coin, derive_rng, normal, uniform, uniform_int};
use crate::series::{HourlySeries, PairedSeries, Partition, SiteMeta, MISSING};
use crate::time::Timestamp;

/// Gap arrivals as a Poisson process with a three-class length mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapModel {
    pub rate_per_hour: f64,
    /// Probability that a gap lasts 1 to 6 hours.
    pub short_frac: f64,
    /// Probability that a gap lasts 7 to 24 hours; the rest last longer.
    pub medium_frac: f64,
    pub long_max_h: usize,
}

impl Default for GapModel {
    fn default() -> Self {
        GapModel {
            rate_per_hour: 2.7e-4,
            short_frac: 0.55,
            medium_frac: 0.17,
            long_max_h: 120,
        }
    }
}

impl GapModel {
    pub fn none() -> Self {
        GapModel {
            rate_per_hour: 0.0,
            ..GapModel::default()
        }
    }

    /// Half-open gap spans over `hours`.
    pub fn draw<R: Rng + ?Sized>(&self, hours: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.rate_per_hour <= 0.0 {
            return out;
        }
        let mut t = 0.0;
        loop {
            t += -ln(1.0 - rng.random::<f64>()) / self.rate_per_hour;
            let s = t as usize;
            if s >= hours {
                return out;
            }
            let u = rng.random::<f64>();
            let len = if u < self.short_frac {
                uniform_int(rng, 1, 6)
            } else if u < self.short_frac + self.medium_frac {
                uniform_int(rng, 7, 24)
            } else {
                uniform_int(rng, 25, self.long_max_h.max(25))
            };
            out.push((s, (s + len).min(hours)));
            t += len as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sites: usize,
    /// Site counts per partition are `round(share * sites)` for train and
    /// validation; the remainder is test.
    pub train_share: f64,
    pub validation_share: f64,
    pub hours: usize,
    pub start: Timestamp,
    pub gaps: GapModel,
    /// Stage sensor noise, ft.
    pub stage_noise_ft: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sites: 5,
            train_share: 0.6,
            validation_share: 0.2,
            hours: 8760,
            start: Timestamp(394_464),
            gaps: GapModel::default(),
            stage_noise_ft: 0.003,
        }
    }
}

/// Ground-truth rating used to derive stage from discharge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueRating {
    pub a: f64,
    pub b: f64,
    pub h0: f64,
}

impl TrueRating {
    pub fn stage(&self, q: f64) -> f64 {
        self.h0 + powf(q.max(0.0) / self.a, 1.0 / self.b)
    }

    pub fn discharge(&self, h: f64) -> f64 {
        if h <= self.h0 {
            0.0
        } else {
            self.a * powf(h - self.h0, self.b)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSite {
    pub meta: SiteMeta,
    pub series: HourlySeries,
    pub rating: TrueRating,
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = powf(10.0, decimals as f64);
    round(x * s) / s
}

/// Clean hourly discharge: seasonal baseflow, storm pulses with exponential
/// recessions and a weak diurnal cycle.
pub fn synth_discharge<R: Rng + ?Sized>(hours: usize, start: Timestamp, base: f64, rng: &mut R) -> Vec<f64> {
    let tau = core::f64::consts::TAU;
    let phase = uniform(rng, 0.0, tau);
    let mut q: Vec<f64> = (0..hours)
        .map(|t| {
            let doy = start.plus_hours(t as i64).day_of_year() as f64;
            let season = 1.0 + 0.45 * sin(tau * (doy - 80.0) / 365.25 + phase);
            let diurnal = 1.0 + 0.015 * sin(tau * t as f64 / 24.0);
            base * season * diurnal
        })
        .collect();
    let mut t = 0.0;
    loop {
        t += -ln(1.0 - rng.random::<f64>()) * uniform(rng, 90.0, 200.0);
        let s = t as usize;
        if s >= hours {
            break;
        }
        let peak = base * exp(0.9 * normal(rng)) * uniform(rng, 0.5, 4.0);
        let rise = uniform_int(rng, 3, 24);
        let k = uniform(rng, 0.015, 0.06);
        for (i, v) in q.iter_mut().enumerate().skip(s) {
            let dt = (i - s) as f64;
            let add = if dt < rise as f64 {
                peak * dt / rise as f64
            } else {
                peak * exp(-k * (dt - rise as f64))
            };
            if dt >= rise as f64 && add < 1e-4 * base {
                break;
            }
            *v += add;
        }
    }
    q
}

pub fn synth_meta<R: Rng + ?Sized>(id: &str, partition: Partition, rng: &mut R) -> SiteMeta {
    SiteMeta {
        site_id: id.into(),
        latitude: round_to(uniform(rng, 30.0, 55.0), 4),
        longitude: round_to(uniform(rng, -124.0, -68.0), 4),
        drainage_area_km2: round_to(exp(uniform(rng, ln(20.0), ln(50_000.0))), 1),
        elevation_m: round_to(uniform(rng, 5.0, 2500.0), 1),
        partition,
    }
}

/// One synthetic site. Values are rounded to the interchange precision
/// (3 decimals discharge, 4 decimals stage).
pub fn synth_site(meta: SiteMeta, cfg: &SynthConfig, seed: u64) -> Result<SynthSite> {
    let mut rng = derive_rng(seed, &["synth", &meta.site_id]);
    let base = 0.02 * meta.drainage_area_km2 * uniform(&mut rng, 0.5, 2.0) + 1.0;
    let rating = TrueRating {
        a: base * uniform(&mut rng, 0.8, 3.0),
        b: uniform(&mut rng, 1.4, 2.8),
        h0: uniform(&mut rng, 0.0, 1.5),
    };
    let q = synth_discharge(cfg.hours, cfg.start, base, &mut rng);
    let mut discharge = Vec::with_capacity(cfg.hours);
    let mut stage = Vec::with_capacity(cfg.hours);
    for &v in &q {
        discharge.push(round_to(v, 3));
        stage.push(round_to(rating.stage(v) + cfg.stage_noise_ft * normal(&mut rng), 4));
    }
    for (s, e) in cfg.gaps.draw(cfg.hours, &mut rng) {
        for k in s..e {
            discharge[k] = MISSING;
            stage[k] = MISSING;
        }
    }
    let series = HourlySeries::new(meta.site_id.clone(), cfg.start, discharge, stage)?;
    Ok(SynthSite { meta, series, rating })
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthSite>> {
    if cfg.sites == 0 || cfg.hours == 0 {
        return Err(Error::invalid("synthetic corpus needs sites and hours"));
    }
    let n_train = round(cfg.train_share * cfg.sites as f64) as usize;
    let n_val = round(cfg.validation_share * cfg.sites as f64) as usize;
    let mut rng = derive_rng(seed, &["synth", "meta"]);
    (0..cfg.sites)
        .map(|i| {
            let part = if i < n_train {
                Partition::Train
            } else if i < n_train + n_val {
                Partition::Validation
            } else {
                Partition::Test
            };
            let meta = synth_meta(&format!("SYN{:04}", i + 1), part, &mut rng);
            synth_site(meta, cfg, seed)
        })
        .collect()
}

/// Operational-style edits applied to a clean (corrected) record to give
/// the raw archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairedConfig {
    /// Mean hours between edit events.
    pub event_spacing_h: f64,
    /// Fraction of hours carrying sub-threshold noise edits.
    pub small_edit_frac: f64,
    /// Fraction of hours with one raw channel missing.
    pub raw_missing_frac: f64,
}

impl Default for PairedConfig {
    fn default() -> Self {
        PairedConfig {
            event_spacing_h: 260.0,
            small_edit_frac: 0.25,
            raw_missing_frac: 0.01,
        }
    }
}

/// Raw/corrected pair from a clean site: the corrected channels are the
/// site record (gaps linearly bridged), the raw channels carry drift,
/// winter backwater, frozen sensors, spikes and small edits. Raw discharge
/// is recomputed from raw stage through the site rating, as an agency
/// would before review.
pub fn synth_paired(site: &SynthSite, cfg: &PairedConfig, seed: u64) -> PairedSeries {
    let mut rng = derive_rng(seed, &["paired", &site.meta.site_id]);
    let n = site.series.len();
    let qc = bridge(&site.series.discharge);
    let hc = bridge(&site.series.stage);
    let mut hr = hc.clone();
    let mut qr = qc.clone();
    let mut stage_edited = vec![false; n];
    let mut t = 0.0;
    loop {
        t += -ln(1.0 - rng.random::<f64>()) * cfg.event_spacing_h;
        let s = t as usize;
        if s >= n {
            break;
        }
        let month = site.series.start.plus_hours(s as i64).month();
        let winter = matches!(month, 12 | 1 | 2);
        let kind = if winter && coin(&mut rng, 0.6) {
            0
        } else {
            uniform_int(&mut rng, 1, 4)
        };
        let len = match kind {
            0 => uniform_int(&mut rng, 48, 300),
            1 => uniform_int(&mut rng, 24, 200),
            2 => uniform_int(&mut rng, 12, 96),
            3 => 1,
            _ => uniform_int(&mut rng, 6, 48),
        };
        let e = (s + len).min(n);
        match kind {
            0 => {
                let rise = uniform(&mut rng, 0.1, 0.6);
                for k in s..e {
                    let ramp = ((k - s) as f64 / 24.0).min(1.0);
                    hr[k] = hc[k] + rise * ramp;
                    stage_edited[k] = true;
                }
            }
            1 => {
                let d = uniform(&mut rng, 0.05, 0.35) * crate::rng::sign(&mut rng);
                for k in s..e {
                    hr[k] = hc[k] + d * (k - s + 1) as f64 / (e - s) as f64;
                    stage_edited[k] = true;
                }
            }
            2 => {
                for k in s..e {
                    hr[k] = hc[s];
                    stage_edited[k] = true;
                }
            }
            3 => {
                qr[s] = qc[s] * uniform(&mut rng, 1.5, 3.0);
            }
            _ => {
                let f = 1.0 + uniform(&mut rng, 0.05, 0.25) * crate::rng::sign(&mut rng);
                for v in &mut qr[s..e] {
                    *v *= f;
                }
            }
        }
    }
    for k in 0..n {
        if stage_edited[k] {
            qr[k] = site.rating.discharge(hr[k]);
        } else if coin(&mut rng, cfg.small_edit_frac) {
            qr[k] *= 1.0 + uniform(&mut rng, -0.008, 0.008);
        }
    }
    for k in 0..n {
        if coin(&mut rng, cfg.raw_missing_frac) {
            if coin(&mut rng, 0.5) {
                qr[k] = MISSING;
            } else {
                hr[k] = MISSING;
            }
        }
    }
    let r3 = |v: Vec<f64>| {
        v.into_iter()
            .map(|x| if x.is_nan() { x } else { round_to(x, 3) })
            .collect()
    };
    let r4 = |v: Vec<f64>| {
        v.into_iter()
            .map(|x| if x.is_nan() { x } else { round_to(x, 4) })
            .collect()
    };
    PairedSeries {
        site_id: site.meta.site_id.clone(),
        start: site.series.start,
        stage_raw: r4(hr),
        stage_corrected: r4(hc),
        discharge_raw: r3(qr),
        discharge_corrected: r3(qc),
    }
}

/// Linear bridging of interior gaps; leading and trailing gaps are held.
fn bridge(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    let known: Vec<usize> = (0..x.len()).filter(|&k| x[k].is_finite()).collect();
    if known.is_empty() {
        return out;
    }
    for k in 0..known[0] {
        out[k] = x[known[0]];
    }
    for k in known[known.len() - 1]..x.len() {
        out[k] = x[known[known.len() - 1]];
    }
    for w in known.windows(2) {
        let (l, r) = (w[0], w[1]);
        for k in l + 1..r {
            out[k] = x[l] + (x[r] - x[l]) * (k - l) as f64 / (r - l) as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{weak_labels, WeakLabelConfig};

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let cfg = SynthConfig {
            hours: 2000,
            ..SynthConfig::default()
        };
        let a = synth_corpus(&cfg, 5).unwrap();
        let b = synth_corpus(&cfg, 5).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.meta, y.meta);
            assert_eq!(bits(&x.series.discharge), bits(&y.series.discharge));
            assert_eq!(bits(&x.series.stage), bits(&y.series.stage));
        }
        let parts: Vec<Partition> = a.iter().map(|s| s.meta.partition).collect();
        assert_eq!(
            parts,
            [
                Partition::Train,
                Partition::Train,
                Partition::Train,
                Partition::Validation,
                Partition::Test
            ]
        );
        for s in &a {
            s.meta.validate().unwrap();
            assert!(s.series.discharge.iter().all(|v| v.is_nan() || *v >= 0.0));
        }
    }

    #[test]
    fn gap_rate_matches_model() {
        let g = GapModel {
            rate_per_hour: 1e-3,
            ..GapModel::default()
        };
        let mut rng = crate::rng::rng_from_seed(2);
        let gaps = g.draw(1_000_000, &mut rng);
        let rate = gaps.len() as f64 / 1e6;
        assert!((rate - 1e-3).abs() < 1e-4, "{rate}");
    }

    #[test]
    fn paired_archive_has_corrections() {
        let cfg = SynthConfig {
            hours: 4000,
            ..SynthConfig::default()
        };
        let site = &synth_corpus(&cfg, 1).unwrap()[0];
        let p = synth_paired(site, &PairedConfig::default(), 1);
        let t = weak_labels(&p, &WeakLabelConfig::default());
        let f = t.anomalous_fraction();
        assert!(f > 0.05 && f < 0.6, "{f}");
    }
}
