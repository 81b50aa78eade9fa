// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{params, place_segments, Channels, Composition, CorruptionRecord, SegmentRecord, Space};
use crate::error::{Error, Result};
use crate::math::{abs, floor, round};
use crate::rng::{coin, normal, uniform, uniform_int};
use crate::series::AnomalyMask;
use crate::window::{channel, Window};

/// The eleven simplified training corruptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainType {
    Spike,
    Drift,
    Flatline,
    Dropout,
    Saturation,
    ClockShift,
    Quantization,
    UnitJump,
    Warp,
    Splice,
    SubtleDrift,
}

impl TrainType {
    pub const ALL: [TrainType; 11] = [
        TrainType::Spike,
        TrainType::Drift,
        TrainType::Flatline,
        TrainType::Dropout,
        TrainType::Saturation,
        TrainType::ClockShift,
        TrainType::Quantization,
        TrainType::UnitJump,
        TrainType::Warp,
        TrainType::Splice,
        TrainType::SubtleDrift,
    ];

    pub fn id(self) -> u8 {
        TrainType::ALL.iter().position(|t| *t == self).unwrap() as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainType::Spike => "spike",
            TrainType::Drift => "drift",
            TrainType::Flatline => "flatline",
            TrainType::Dropout => "dropout",
            TrainType::Saturation => "saturation",
            TrainType::ClockShift => "clock_shift",
            TrainType::Quantization => "quantization",
            TrainType::UnitJump => "unit_jump",
            TrainType::Warp => "warp",
            TrainType::Splice => "splice",
            TrainType::SubtleDrift => "subtle_drift",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Light,
    Moderate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainInjectConfig {
    pub light_prob: f64,
    pub light_cov: [f64; 2],
    pub moderate_cov: [f64; 2],
    pub light_tol: f64,
    pub moderate_tol: f64,
    pub single_type_prob: f64,
    pub n_segments: [usize; 2],
    /// Segment length bounds as fractions of the window length.
    pub seg_len_frac: [f64; 2],
    /// Injection probability for epochs `1..=early_epochs`, then `late_prob`.
    pub early_prob: f64,
    pub late_prob: f64,
    pub early_epochs: u32,
    pub max_attempts: usize,
    pub grow: [f64; 2],
    pub shrink: [f64; 2],
    pub placement_draws: usize,
}

impl Default for TrainInjectConfig {
    fn default() -> Self {
        TrainInjectConfig {
            light_prob: 0.60,
            light_cov: [0.05, 0.15],
            moderate_cov: [0.15, 0.30],
            light_tol: 0.03,
            moderate_tol: 0.05,
            single_type_prob: 0.60,
            n_segments: [2, 4],
            seg_len_frac: [0.01, 0.25],
            early_prob: 0.2,
            late_prob: 0.4,
            early_epochs: 2,
            max_attempts: 3,
            grow: [1.1, 1.4],
            shrink: [0.7, 0.9],
            placement_draws: 100,
        }
    }
}

impl TrainInjectConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.light_prob, self.single_type_prob, self.early_prob, self.late_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("train injector probabilities must lie in [0, 1]"));
        }
        for r in [self.light_cov, self.moderate_cov] {
            if !(0.0 < r[0] && r[0] <= r[1] && r[1] < 1.0) {
                return Err(Error::invalid("train injector coverage ranges must lie in (0, 1)"));
            }
        }
        if self.n_segments[0] == 0 || self.n_segments[0] > self.n_segments[1] || self.max_attempts == 0 {
            return Err(Error::invalid(
                "train injector segment counts and attempts must be positive",
            ));
        }
        Ok(())
    }

    pub fn tier_tolerance(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Light => self.light_tol,
            Tier::Moderate => self.moderate_tol,
        }
    }

    pub fn tier_range(&self, tier: Tier) -> [f64; 2] {
        match tier {
            Tier::Light => self.light_cov,
            Tier::Moderate => self.moderate_cov,
        }
    }
}

/// Injection probability for a 1-based epoch.
pub fn curriculum_probability(epoch: u32, cfg: &TrainInjectConfig) -> f64 {
    if epoch <= cfg.early_epochs {
        cfg.early_prob
    } else {
        cfg.late_prob
    }
}

/// Curriculum-gated training corruption. The clean branch returns the
/// window unchanged with an empty record.
pub fn inject_training<R: Rng + ?Sized>(
    window: &Window,
    cfg: &TrainInjectConfig,
    epoch: u32,
    seed: u64,
    rng: &mut R,
) -> (Window, CorruptionRecord) {
    if !coin(rng, curriculum_probability(epoch.max(1), cfg)) {
        return (
            window.clone(),
            CorruptionRecord::clean(window.len(), seed, Space::Normalized),
        );
    }
    corrupt_training(window, cfg, seed, rng)
}

fn seg_bounds(cfg: &TrainInjectConfig, t: usize) -> (usize, usize) {
    let lo = (crate::math::ceil(cfg.seg_len_frac[0] * t as f64) as usize).max(1);
    let hi = (floor(cfg.seg_len_frac[1] * t as f64) as usize).max(lo);
    (lo, hi)
}

struct Attempt {
    q: Vec<f64>,
    h: Vec<f64>,
    mask: Vec<bool>,
    segments: Vec<SegmentRecord>,
    coverage: f64,
}

/// Always-corrupt path with the coverage-control loop.
pub fn corrupt_training<R: Rng + ?Sized>(
    window: &Window,
    cfg: &TrainInjectConfig,
    seed: u64,
    rng: &mut R,
) -> (Window, CorruptionRecord) {
    let t = window.len();
    let (min_len, max_len) = seg_bounds(cfg, t);
    if t < min_len || t == 0 {
        log::warn!("{}: window shorter than a minimum segment, left clean", window.site_id);
        return (window.clone(), CorruptionRecord::clean(t, seed, Space::Normalized));
    }
    let tier = if coin(rng, cfg.light_prob) {
        Tier::Light
    } else {
        Tier::Moderate
    };
    let range = cfg.tier_range(tier);
    let target = uniform(rng, range[0], range[1]);
    let tol = cfg.tier_tolerance(tier);
    let single = coin(rng, cfg.single_type_prob);
    let first = TrainType::ALL[uniform_int(rng, 0, 10)];
    let types = if single {
        vec![first]
    } else {
        let mut second = first;
        while second == first {
            second = TrainType::ALL[uniform_int(rng, 0, 10)];
        }
        vec![first, second]
    };
    let n_seg = uniform_int(rng, cfg.n_segments[0], cfg.n_segments[1]);

    let q0 = window.channel(channel::DISCHARGE);
    let h0 = window.channel(channel::STAGE);
    let mut alpha = 1.0;
    let mut best: Option<Attempt> = None;
    let mut attempts = 0;
    for _ in 0..cfg.max_attempts {
        attempts += 1;
        let weights: Vec<f64> = (0..n_seg).map(|_| uniform(rng, 0.5, 1.5)).collect();
        let wsum: f64 = weights.iter().sum();
        let budget = alpha * target * t as f64;
        let lens: Vec<usize> = weights
            .iter()
            .map(|w| (round(budget * w / wsum) as usize).clamp(min_len, max_len))
            .collect();
        let spans = place_segments(&lens, t, rng, cfg.placement_draws);
        let (mut q, mut h) = (q0.clone(), h0.clone());
        let mut mask = vec![false; t];
        let mut segments = Vec::with_capacity(spans.len());
        for (i, &(s, e)) in spans.iter().enumerate() {
            let ty = if i < types.len() {
                types[i]
            } else {
                types[uniform_int(rng, 0, types.len() - 1)]
            };
            let chans = Channels::ALL[uniform_int(rng, 0, 2)];
            let mut record = SegmentRecord {
                type_id: ty.id(),
                type_name: String::from(ty.name()),
                variant: String::from("simplified"),
                start: s,
                end: e,
                channels: chans,
                params: Default::default(),
            };
            let draw = Draw::new(ty, s, e, t, rng);
            if chans.discharge() {
                apply(ty, &draw, &mut q, s, e, rng, &mut record, "q");
            }
            if chans.stage() {
                apply(ty, &draw, &mut h, s, e, rng, &mut record, "h");
            }
            draw.record(&mut record);
            mask[s..e].iter_mut().for_each(|m| *m = true);
            segments.push(record);
        }
        let coverage = mask.iter().filter(|m| **m).count() as f64 / t as f64;
        let err = abs(coverage - target);
        let attempt = Attempt {
            q,
            h,
            mask,
            segments,
            coverage,
        };
        if best.as_ref().map_or(true, |b| err < abs(b.coverage - target)) {
            best = Some(attempt);
        }
        if err < tol {
            break;
        }
        alpha *= if coverage < target {
            uniform(rng, cfg.grow[0], cfg.grow[1])
        } else {
            uniform(rng, cfg.shrink[0], cfg.shrink[1])
        };
    }
    let best = best.expect("at least one attempt");
    let mut out = window.clone();
    let tau = window.norm.clip_tau;
    for k in 0..t {
        let (q, h) = (best.q[k].clamp(-tau, tau), best.h[k].clamp(-tau, tau));
        out.features[k][channel::DISCHARGE] = q;
        out.features[k][channel::STAGE] = h;
        if best.mask[k] {
            if q != q0[k] {
                out.discharge[k] = window.norm.q_to_physical(q);
            }
            if h != h0[k] {
                out.stage[k] = window.norm.h_to_physical(h);
            }
        }
    }
    let mut type_labels = vec![None; t];
    for seg in &best.segments {
        for l in &mut type_labels[seg.start..seg.end] {
            l.get_or_insert(seg.type_id);
        }
    }
    let record = CorruptionRecord {
        mask: AnomalyMask {
            flags: best.mask,
            type_labels: Some(type_labels),
        },
        segments: best.segments,
        seed,
        realized_coverage: best.coverage,
        space: Space::Normalized,
        composition: if single {
            Composition::Single
        } else {
            Composition::Compound
        },
        tier: Some(tier),
        target_coverage: Some(target),
        attempts,
    };
    (out, record)
}

/// Segment-level draws shared by both channels.
struct Draw {
    scalar: f64,
    shift: i64,
    source: usize,
}

impl Draw {
    fn new<R: Rng + ?Sized>(ty: TrainType, s: usize, e: usize, t: usize, rng: &mut R) -> Self {
        let len = e - s;
        let (scalar, shift, source) = match ty {
            TrainType::Spike => (uniform(rng, 2.0, 5.0), 0, 0),
            TrainType::Drift => (uniform(rng, -0.01, 0.01), 0, 0),
            TrainType::SubtleDrift => (uniform(rng, -0.002, 0.002), 0, 0),
            TrainType::Dropout => (uniform(rng, 1e-6, 1e-4), 0, 0),
            TrainType::Quantization => (uniform(rng, 0.05, 0.2), 0, 0),
            TrainType::UnitJump => (uniform(rng, -1.0, 1.0), 0, 0),
            TrainType::Warp => (uniform(rng, 0.8, 1.2), 0, 0),
            TrainType::ClockShift => {
                let mag = uniform_int(rng, 1, 3) as i64;
                (0.0, if rng.random::<bool>() { mag } else { -mag }, 0)
            }
            TrainType::Splice => {
                let mut src = s;
                if t > len {
                    for _ in 0..100 {
                        src = uniform_int(rng, 0, t - len);
                        if src != s {
                            break;
                        }
                    }
                }
                (0.0, 0, src)
            }
            TrainType::Flatline | TrainType::Saturation => (0.0, 0, 0),
        };
        Draw { scalar, shift, source }
    }

    fn record(&self, rec: &mut SegmentRecord) {
        let key = match rec.type_name.as_str() {
            "spike" => "alpha",
            "drift" | "subtle_drift" => "beta",
            "dropout" => "epsilon",
            "quantization" => "delta_q",
            "unit_jump" => "gamma",
            "warp" => "w",
            "clock_shift" => {
                rec.params.insert(String::from("shift_h"), self.shift as f64);
                return;
            }
            "splice" => {
                rec.params.insert(String::from("source_start"), self.source as f64);
                return;
            }
            _ => return,
        };
        rec.params.insert(String::from(key), self.scalar);
    }
}

#[allow(clippy::too_many_arguments)]
fn apply<R: Rng + ?Sized>(
    ty: TrainType,
    d: &Draw,
    x: &mut [f64],
    s: usize,
    e: usize,
    rng: &mut R,
    rec: &mut SegmentRecord,
    ch: &str,
) {
    let orig: Vec<f64> = x.to_vec();
    let n = x.len();
    match ty {
        TrainType::Spike => {
            let sigma = crate::math::std_dev(&orig).unwrap_or(0.0).max(0.1);
            rec.params.insert(alloc::format!("sigma_{ch}"), sigma);
            for v in &mut x[s..e] {
                *v += normal(rng) * d.scalar * sigma;
            }
        }
        TrainType::Drift | TrainType::SubtleDrift => {
            for (i, v) in x[s..e].iter_mut().enumerate() {
                *v += d.scalar * i as f64;
            }
        }
        TrainType::Flatline => {
            let v0 = orig[s];
            x[s..e].iter_mut().for_each(|v| *v = v0);
        }
        TrainType::Dropout => x[s..e].iter_mut().for_each(|v| *v = d.scalar),
        TrainType::Saturation => {
            let seg = &orig[s..e];
            let lo = seg.iter().copied().fold(f64::INFINITY, f64::min) + 0.1;
            let hi = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 0.1;
            let (lo, hi) = if lo <= hi {
                (lo, hi)
            } else {
                ((lo + hi) / 2.0, (lo + hi) / 2.0)
            };
            rec.params.extend(
                params([("lo", lo), ("hi", hi)])
                    .into_iter()
                    .map(|(k, v)| (alloc::format!("{k}_{ch}"), v)),
            );
            x[s..e].iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
        TrainType::ClockShift => {
            for t in s..e {
                let src = (t as i64 + d.shift).clamp(0, n as i64 - 1) as usize;
                x[t] = orig[src];
            }
        }
        TrainType::Quantization => x[s..e].iter_mut().for_each(|v| *v = round(*v / d.scalar) * d.scalar),
        TrainType::UnitJump => x[s..e].iter_mut().for_each(|v| *v += d.scalar),
        TrainType::Warp => {
            for t in s..e {
                let pos = (s as f64 + (t - s) as f64 * d.scalar).min((n - 1) as f64);
                x[t] = interp(&orig, pos);
            }
        }
        TrainType::Splice => {
            let len = e - s;
            x[s..e].copy_from_slice(&orig[d.source..d.source + len]);
        }
    }
}

/// Linear interpolation at a fractional index.
pub(crate) fn interp(x: &[f64], pos: f64) -> f64 {
    let pos = pos.clamp(0.0, (x.len() - 1) as f64);
    let i = floor(pos) as usize;
    if i + 1 >= x.len() {
        return x[x.len() - 1];
    }
    let f = pos - i as f64;
    x[i] + (x[i + 1] - x[i]) * f
}
