// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::train::interp;
use super::{Channels, Composition, CorruptionRecord, SegmentRecord, Space};
use crate::error::{Error, Result};
use crate::math::{exp, floor, ln, log2, powf, round, sin};
use crate::normalize::refresh_dynamic_channels;
use crate::qc::MonthlyClimatology;
use crate::rng::{coin, normal, sign, uniform, uniform_int};
use crate::series::{is_missing, AnomalyMask};
use crate::units::{CFS_PER_CMS, FT_PER_M};
use crate::window::Window;

/// Version of the equation catalog; bump whenever a variant changes.
pub const CATALOG_VERSION: &str = "test-injector/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    Spike,
    Dropout,
    Flatline,
    Backwater,
    IceBackwater,
    DebrisEffect,
    Sedimentation,
    Drift,
    RatingDrift,
    SensorFouling,
    BiasStep,
    TimeMisalignment,
    Quantization,
    UnitMismatch,
    Splice,
    Warp,
    NoiseBurst,
    GateOperation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Micro,
    Meso,
    Macro,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 18] = [
        AnomalyType::Spike,
        AnomalyType::Dropout,
        AnomalyType::Flatline,
        AnomalyType::Backwater,
        AnomalyType::IceBackwater,
        AnomalyType::DebrisEffect,
        AnomalyType::Sedimentation,
        AnomalyType::Drift,
        AnomalyType::RatingDrift,
        AnomalyType::SensorFouling,
        AnomalyType::BiasStep,
        AnomalyType::TimeMisalignment,
        AnomalyType::Quantization,
        AnomalyType::UnitMismatch,
        AnomalyType::Splice,
        AnomalyType::Warp,
        AnomalyType::NoiseBurst,
        AnomalyType::GateOperation,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<AnomalyType> {
        AnomalyType::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AnomalyType::Spike => "spike",
            AnomalyType::Dropout => "dropout",
            AnomalyType::Flatline => "flatline",
            AnomalyType::Backwater => "backwater",
            AnomalyType::IceBackwater => "ice_backwater",
            AnomalyType::DebrisEffect => "debris_effect",
            AnomalyType::Sedimentation => "sedimentation",
            AnomalyType::Drift => "drift",
            AnomalyType::RatingDrift => "rating_drift",
            AnomalyType::SensorFouling => "sensor_fouling",
            AnomalyType::BiasStep => "bias_step",
            AnomalyType::TimeMisalignment => "time_misalignment",
            AnomalyType::Quantization => "quantization",
            AnomalyType::UnitMismatch => "unit_mismatch",
            AnomalyType::Splice => "splice",
            AnomalyType::Warp => "warp",
            AnomalyType::NoiseBurst => "noise_burst",
            AnomalyType::GateOperation => "gate_operation",
        }
    }

    pub fn parse(s: &str) -> Option<AnomalyType> {
        AnomalyType::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn regime(self) -> Regime {
        use AnomalyType::*;
        match self {
            Spike | Dropout | NoiseBurst => Regime::Micro,
            Backwater | IceBackwater | Sedimentation | Drift | RatingDrift | SensorFouling => Regime::Macro,
            _ => Regime::Meso,
        }
    }

    pub fn variants(self) -> &'static [&'static str] {
        use AnomalyType::*;
        match self {
            Spike => &["impulse", "triangular", "decaying", "multiplicative"],
            Dropout => &["zero", "near_zero", "fractional", "intermittent"],
            Flatline => &["freeze_start", "freeze_mean", "stale_value", "sample_hold"],
            Backwater => &["linear_onset", "sigmoid_onset", "exponential_onset", "rise_and_recede"],
            IceBackwater => &["gradual_onset", "abrupt_recovery", "periodic_breakup"],
            DebrisEffect => &["accumulate_clear", "step_washout", "cycles"],
            Sedimentation => &["linear", "logarithmic", "stepwise"],
            Drift => &["linear", "exponential", "sigmoid", "polynomial"],
            RatingDrift => &["linear", "exponential_approach", "abrupt_shift", "exponent_change"],
            SensorFouling => &["damping", "lag", "bias_growth"],
            BiasStep => &["additive", "multiplicative", "overshoot"],
            TimeMisalignment => &["constant_shift", "large_shift", "progressive", "channel_offset"],
            Quantization => &["fixed_step", "truncation", "significant_digits"],
            UnitMismatch => &["stage_m_ft", "discharge_cms_cfs", "both_si"],
            Splice => &["raw", "single_channel", "level_matched"],
            Warp => &["stretch", "compress", "nonuniform"],
            NoiseBurst => &["white", "multiplicative", "enveloped", "impulsive"],
            GateOperation => &["release_step", "ramped_release", "closure", "pulsed"],
        }
    }

    /// Types whose mask covers the whole segment because resampled values
    /// can coincide with the originals.
    pub fn masks_full_segment(self) -> bool {
        matches!(
            self,
            AnomalyType::TimeMisalignment | AnomalyType::Warp | AnomalyType::Splice
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestInjectConfig {
    pub single_type_prob: f64,
    pub overlap_prob: f64,
    pub compound_types: [usize; 2],
    pub micro_h: [usize; 2],
    pub meso_h: [usize; 2],
    pub macro_h: [usize; 2],
    /// Hard cap on one segment's length.
    pub max_segment_h: usize,
    /// Types eligible for selection (all when empty).
    pub types: Vec<AnomalyType>,
    pub placement_draws: usize,
}

impl Default for TestInjectConfig {
    fn default() -> Self {
        TestInjectConfig {
            single_type_prob: 0.30,
            overlap_prob: 0.40,
            compound_types: [2, 3],
            micro_h: [3, 58],
            meso_h: [7, 192],
            macro_h: [72, 520],
            max_segment_h: 345,
            types: Vec::new(),
            placement_draws: 100,
        }
    }
}

impl TestInjectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.single_type_prob) || !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::invalid("test injector probabilities must lie in [0, 1]"));
        }
        for r in [self.micro_h, self.meso_h, self.macro_h] {
            if r[0] == 0 || r[0] > r[1] {
                return Err(Error::invalid(
                    "test injector duration ranges must be positive and ordered",
                ));
            }
        }
        if self.compound_types[0] < 2 || self.compound_types[0] > self.compound_types[1] {
            return Err(Error::invalid("compound sequences need at least two types"));
        }
        Ok(())
    }

    fn eligible(&self) -> Vec<AnomalyType> {
        if self.types.is_empty() {
            AnomalyType::ALL.to_vec()
        } else {
            let mut t = self.types.clone();
            t.sort_unstable();
            t.dedup();
            t
        }
    }

    pub fn duration_range(&self, r: Regime) -> [usize; 2] {
        match r {
            Regime::Micro => self.micro_h,
            Regime::Meso => self.meso_h,
            Regime::Macro => self.macro_h,
        }
    }
}

/// Window-level scales every variant draws against.
struct Scales {
    q_mean: f64,
    q_sd: f64,
    h_mean: f64,
    h_sd: f64,
}

fn scale_of(x: &[f64]) -> (f64, f64) {
    let (m, s) = crate::math::mean_std(x).unwrap_or((0.0, 0.0));
    (m, s.max(0.01 * m.abs()).max(1e-3))
}

struct Seg<'a, R: Rng + ?Sized> {
    q: &'a mut [f64],
    h: &'a mut [f64],
    s: usize,
    e: usize,
    sc: &'a Scales,
    rng: &'a mut R,
    params: BTreeMap<String, f64>,
}

impl<R: Rng + ?Sized> Seg<'_, R> {
    fn len(&self) -> usize {
        self.e - self.s
    }

    fn p(&mut self, k: &str, v: f64) -> f64 {
        self.params.insert(String::from(k), v);
        v
    }

    fn u(&mut self, k: &str, lo: f64, hi: f64) -> f64 {
        let v = uniform(self.rng, lo, hi);
        self.p(k, v)
    }

    fn ui(&mut self, k: &str, lo: usize, hi: usize) -> usize {
        let v = uniform_int(self.rng, lo, hi);
        self.p(k, v as f64);
        v
    }

    fn signed(&mut self, k: &str, lo: f64, hi: f64) -> f64 {
        let v = sign(self.rng) * uniform(self.rng, lo, hi);
        self.p(k, v)
    }

    /// Applies `f(tau, x)` over the segment on the selected channels.
    fn each(&mut self, ch: Channels, mut fq: impl FnMut(usize, f64) -> f64, mut fh: impl FnMut(usize, f64) -> f64) {
        for t in self.s..self.e {
            if ch.discharge() && !is_missing(self.q[t]) {
                self.q[t] = fq(t - self.s, self.q[t]);
            }
            if ch.stage() && !is_missing(self.h[t]) {
                self.h[t] = fh(t - self.s, self.h[t]);
            }
        }
    }

    fn sd(&self, c: char) -> f64 {
        if c == 'q' {
            self.sc.q_sd
        } else {
            self.sc.h_sd
        }
    }
}

fn random_channels<R: Rng + ?Sized>(rng: &mut R) -> Channels {
    Channels::ALL[uniform_int(rng, 0, 2)]
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

/// Applies one variant of one type to `[s, e)`; returns the channels touched.
fn apply_type<R: Rng + ?Sized>(ty: AnomalyType, variant: &str, g: &mut Seg<'_, R>) -> Channels {
    use AnomalyType::*;
    let l = g.len() as f64;
    match ty {
        Spike => {
            let ch = random_channels(g.rng);
            let n_spikes = g.ui("n_spikes", 1, (g.len() / 6).max(1));
            for i in 0..n_spikes {
                let pos = g.s + uniform_int(g.rng, 0, g.len() - 1);
                g.p(&alloc::format!("pos_{i}"), pos as f64);
                let mag = g.signed(&alloc::format!("sigmas_{i}"), 3.0, 5.0);
                let width = if variant == "triangular" {
                    g.ui(&alloc::format!("width_{i}"), 1, 3)
                } else {
                    0
                };
                let tau_d = if variant == "decaying" {
                    g.u(&alloc::format!("decay_h_{i}"), 1.0, 4.0)
                } else {
                    0.0
                };
                let rel = if variant == "multiplicative" {
                    g.u(&alloc::format!("rel_{i}"), 0.5, 2.0)
                } else {
                    0.0
                };
                for (c, x) in [('q', &mut *g.q), ('h', &mut *g.h)] {
                    if (c == 'q' && !ch.discharge()) || (c == 'h' && !ch.stage()) {
                        continue;
                    }
                    let amp = mag * if c == 'q' { g.sc.q_sd } else { g.sc.h_sd };
                    let at_pos = x[pos];
                    let mut bump = |t: usize, a: f64| {
                        if t >= g.s && t < g.e && !is_missing(x[t]) {
                            x[t] += a;
                        }
                    };
                    match variant {
                        "triangular" => {
                            for j in 0..=width {
                                let a = amp * (1.0 - j as f64 / (width + 1) as f64);
                                bump(pos + j, a);
                                if j > 0 && pos >= j {
                                    bump(pos - j, a);
                                }
                            }
                        }
                        "decaying" => {
                            for j in 0..(6.0 * tau_d) as usize {
                                bump(pos + j, amp * exp(-(j as f64) / tau_d));
                            }
                        }
                        "multiplicative" => {
                            let cap = 5.0 * amp.abs() / mag.abs();
                            let a = (rel * at_pos.abs()).min(cap) * mag.signum();
                            bump(pos, if a == 0.0 { amp } else { a });
                        }
                        _ => bump(pos, amp),
                    }
                }
            }
            ch
        }
        Dropout => {
            let ch = random_channels(g.rng);
            match variant {
                "zero" => g.each(ch, |_, _| 0.0, |_, _| 0.0),
                "near_zero" => {
                    let eps = g.u("epsilon", 1e-6, 1e-4);
                    g.each(ch, |_, _| eps, |_, _| eps)
                }
                "fractional" => {
                    let f = g.u("fraction", 0.0, 0.05);
                    g.each(ch, |_, x| x * f, |_, x| x * f)
                }
                _ => {
                    let keep: Vec<bool> = (0..g.len()).map(|i| i % 2 == 1 && coin(g.rng, 0.5)).collect();
                    g.each(
                        ch,
                        |t, x| if keep[t] { x } else { 0.0 },
                        |t, x| if keep[t] { x } else { 0.0 },
                    )
                }
            }
            ch
        }
        Flatline => {
            let ch = if coin(g.rng, 0.5) {
                Channels::Both
            } else {
                random_channels(g.rng)
            };
            let (s, e) = (g.s, g.e);
            let pick = |x: &[f64]| -> Vec<f64> { x.to_vec() };
            let (q0, h0) = (pick(g.q), pick(g.h));
            match variant {
                "freeze_start" => g.each(ch, |_, _| q0[s], |_, _| h0[s]),
                "freeze_mean" => {
                    let (mq, mh) = (
                        crate::math::mean(&q0[s..e]).unwrap_or(0.0),
                        crate::math::mean(&h0[s..e]).unwrap_or(0.0),
                    );
                    g.each(ch, |_, _| mq, |_, _| mh)
                }
                "stale_value" => {
                    let back = g.ui("lag_h", 1, 24);
                    let src = s.saturating_sub(back);
                    g.each(ch, |_, _| q0[src], |_, _| h0[src])
                }
                _ => {
                    let k = g.ui("hold_h", 3, 8);
                    g.each(ch, |t, _| q0[s + t / k * k], |t, _| h0[s + t / k * k])
                }
            }
            ch
        }
        Backwater => {
            let dh = g.u("rise_sigmas", 0.5, 2.0) * g.sc.h_sd;
            let dh = g.p("rise_ft", dh.max(0.1));
            let on = g.u("onset_h", 6.0, (l / 2.0).max(7.0));
            let ramp = |tau: f64| -> f64 {
                match variant {
                    "linear_onset" => (tau / on).min(1.0),
                    "sigmoid_onset" => logistic((tau - on / 2.0) * 8.0 / on),
                    "exponential_onset" => 1.0 - exp(-3.0 * tau / on),
                    _ => (tau / on).min(1.0).min(((l - tau) / on).max(0.0)),
                }
            };
            g.each(Channels::Stage, |_, x| x, |t, x| x + dh * ramp(t as f64));
            Channels::Stage
        }
        IceBackwater => {
            let a_max = g.u("alpha_max", 0.15, 0.55);
            let b_max = g.u("beta_max", 0.0, 0.10);
            let alpha: Vec<f64> = match variant {
                "gradual_onset" => {
                    let tp = g.u("t_peak_h", 12.0, 48.0).min(l);
                    (0..g.len()).map(|t| a_max * (t as f64 / tp).min(1.0)).collect()
                }
                "abrupt_recovery" => {
                    let rec = g.u("recover_frac", 0.3, 0.7) * l;
                    let k = g.u("k", 0.01, 0.05);
                    (0..g.len())
                        .map(|t| {
                            let t = t as f64;
                            if t <= rec {
                                a_max
                            } else {
                                a_max * exp(-k * (t - rec))
                            }
                        })
                        .collect()
                }
                _ => {
                    let base = g.u("alpha_base", 0.2, 0.4);
                    let n_ev = g.ui("n_events", 2, 5);
                    let mut alpha = vec![base; g.len()];
                    for i in 0..n_ev {
                        let ti = g.u(&alloc::format!("t_{i}"), 0.0, l);
                        let ai = g.u(&alloc::format!("amp_{i}"), -0.3, -0.1);
                        let si = g.u(&alloc::format!("width_{i}"), 1.0, 6.0);
                        for (t, a) in alpha.iter_mut().enumerate() {
                            let d = t as f64 - ti;
                            *a += ai * exp(-d * d / (2.0 * si * si));
                        }
                    }
                    g.p("alpha_max", base);
                    alpha.into_iter().map(|a| a.max(0.0)).collect()
                }
            };
            let a_ref = g.params["alpha_max"];
            let beta: Vec<f64> = alpha.iter().map(|a| b_max * (a / a_ref).clamp(0.0, 1.0)).collect();
            g.each(Channels::Both, |t, x| x * (1.0 - beta[t]), |t, x| x * (1.0 + alpha[t]));
            Channels::Both
        }
        DebrisEffect => {
            let dh = (g.u("rise_sigmas", 0.3, 1.5) * g.sc.h_sd).max(0.05);
            g.p("rise_ft", dh);
            match variant {
                "accumulate_clear" => g.each(Channels::Stage, |_, x| x, |t, x| x + dh * (t + 1) as f64 / l),
                "step_washout" => {
                    let k = g.u("k", 0.02, 0.1);
                    g.each(Channels::Stage, |_, x| x, |t, x| x + dh * exp(-k * t as f64))
                }
                _ => {
                    let n = g.ui("n_cycles", 2, 4) as f64;
                    g.each(
                        Channels::Stage,
                        |_, x| x,
                        |t, x| {
                            let ph = (t + 1) as f64 * n / l;
                            x + dh * (ph - floor(ph)).max(1.0 / l)
                        },
                    )
                }
            }
            Channels::Stage
        }
        Sedimentation => {
            let d = (g.u("shift_sigmas", 0.2, 1.0) * g.sc.h_sd).max(0.05);
            g.p("shift_ft", d);
            match variant {
                "linear" => g.each(Channels::Stage, |_, x| x, |t, x| x + d * (t + 1) as f64 / l),
                "logarithmic" => g.each(
                    Channels::Stage,
                    |_, x| x,
                    |t, x| x + d * ln(2.0 + t as f64) / ln(1.0 + l),
                ),
                _ => {
                    let n = g.ui("n_steps", 2, 4);
                    let mut at: Vec<usize> = (0..n).map(|_| uniform_int(g.rng, 0, g.len() - 1)).collect();
                    at.sort_unstable();
                    at[0] = 0;
                    g.each(
                        Channels::Stage,
                        |_, x| x,
                        |t, x| x + d * at.iter().filter(|a| **a <= t).count() as f64 / n as f64,
                    )
                }
            }
            Channels::Stage
        }
        Drift => {
            let ch = random_channels(g.rng);
            match variant {
                "linear" => {
                    let bq = g.u("beta_q", -0.5, 0.5);
                    let bh = g.u("beta_h", -0.01, 0.01);
                    g.each(ch, |t, x| x + bq * (t + 1) as f64, |t, x| x + bh * (t + 1) as f64)
                }
                "exponential" => {
                    let aq = g.u("alpha_q", -0.01, 0.01);
                    let ah = g.u("alpha_h", -0.005, 0.005);
                    g.each(
                        ch,
                        |t, x| x * exp(aq * (t + 1) as f64),
                        |t, x| x * exp(ah * (t + 1) as f64),
                    )
                }
                "sigmoid" => {
                    let qm = g.sc.q_mean;
                    let dq = g.u("delta_q", -qm / 2.0, qm / 2.0);
                    let kq = g.u("k_q", 0.1, 0.5);
                    let hs = 2.0 * g.sc.h_sd;
                    let dh = g.u("delta_h", -hs, hs);
                    let kh = g.u("k_h", 0.1, 0.5);
                    let mid = l / 2.0;
                    g.each(
                        ch,
                        |t, x| x + dq * logistic(kq * (t as f64 - mid)),
                        |t, x| x + dh * logistic(kh * (t as f64 - mid)),
                    )
                }
                _ => {
                    let (qm, hm) = (g.sc.q_mean, g.sc.h_mean);
                    let dq = g.signed("end_q", 0.1 * qm, 0.3 * qm);
                    let dh = g.signed("end_h", 0.1 * hm, 0.3 * hm);
                    let f = g.u("quadratic_share", 0.0, 1.0);
                    let (aq, bq) = (f * dq / (l * l), (1.0 - f) * dq / l);
                    let (ah, bh) = (f * dh / (l * l), (1.0 - f) * dh / l);
                    g.each(
                        ch,
                        |t, x| {
                            let t = (t + 1) as f64;
                            x + aq * t * t + bq * t
                        },
                        |t, x| {
                            let t = (t + 1) as f64;
                            x + ah * t * t + bh * t
                        },
                    )
                }
            }
            ch
        }
        RatingDrift => {
            let r = g.signed("rel_change", 0.05, 0.25);
            match variant {
                "linear" => g.each(Channels::Discharge, |t, x| x * (1.0 + r * (t + 1) as f64 / l), |_, x| x),
                "exponential_approach" => g.each(
                    Channels::Discharge,
                    |t, x| x * (1.0 + r * (1.0 - exp(-3.0 * (t + 1) as f64 / l))),
                    |_, x| x,
                ),
                "abrupt_shift" => {
                    let at = g.ui("onset_offset_h", 0, g.len() / 3);
                    g.each(
                        Channels::Discharge,
                        |t, x| if t >= at { x * (1.0 + r) } else { x },
                        |_, x| x,
                    )
                }
                _ => {
                    let qm = g.sc.q_mean.max(1e-6);
                    let d = g.signed("exponent_change", 0.05, 0.3);
                    g.each(
                        Channels::Discharge,
                        |t, x| {
                            if x > 0.0 {
                                qm * powf(x / qm, 1.0 + d * (t + 1) as f64 / l)
                            } else {
                                x
                            }
                        },
                        |_, x| x,
                    )
                }
            }
            Channels::Discharge
        }
        SensorFouling => {
            let ch = random_channels(g.rng);
            let (s, e) = (g.s, g.e);
            match variant {
                "damping" => {
                    let dmax = g.u("damping_max", 0.3, 0.8);
                    let mq = crate::math::mean(&g.q[s..e]).unwrap_or(0.0);
                    let mh = crate::math::mean(&g.h[s..e]).unwrap_or(0.0);
                    g.each(
                        ch,
                        |t, x| mq + (x - mq) * (1.0 - dmax * (t + 1) as f64 / l),
                        |t, x| mh + (x - mh) * (1.0 - dmax * (t + 1) as f64 / l),
                    )
                }
                "lag" => {
                    let amin = g.u("gain_min", 0.05, 0.3);
                    for x in [&mut *g.q, &mut *g.h]
                        .into_iter()
                        .zip([ch.discharge(), ch.stage()])
                        .filter(|p| p.1)
                        .map(|p| p.0)
                    {
                        let mut y = x[s];
                        for t in s..e {
                            let a = 1.0 - (1.0 - amin) * (t - s + 1) as f64 / l;
                            y += a * (x[t] - y);
                            x[t] = y;
                        }
                    }
                }
                _ => {
                    let f = g.u("bias_max", 0.05, 0.2);
                    g.each(
                        ch,
                        |t, x| x * (1.0 - f * (t + 1) as f64 / l),
                        |t, x| x * (1.0 - f * (t + 1) as f64 / l),
                    )
                }
            }
            ch
        }
        BiasStep => {
            let ch = random_channels(g.rng);
            match variant {
                "multiplicative" => {
                    let m = 1.0 + g.signed("rel_offset", 0.1, 0.3);
                    g.each(ch, |_, x| x * m, |_, x| x * m)
                }
                _ => {
                    let k = g.signed("offset_sigmas", 1.0, 3.0);
                    let (cq, ch_) = (k * g.sd('q'), k * g.sd('h'));
                    let over = variant == "overshoot";
                    let shape = move |t: usize| if over { 1.0 + 0.5 * exp(-(t as f64) / 3.0) } else { 1.0 };
                    g.each(ch, |t, x| x + cq * shape(t), |t, x| x + ch_ * shape(t))
                }
            }
            ch
        }
        TimeMisalignment => {
            let ch = if variant == "channel_offset" {
                if coin(g.rng, 0.5) {
                    Channels::Discharge
                } else {
                    Channels::Stage
                }
            } else {
                random_channels(g.rng)
            };
            let shift_at: Vec<i64> = match variant {
                "constant_shift" | "large_shift" | "channel_offset" => {
                    let (lo, hi) = match variant {
                        "large_shift" => (4, 12),
                        "channel_offset" => (1, 6),
                        _ => (1, 3),
                    };
                    let d = sign(g.rng) as i64 * uniform_int(g.rng, lo, hi) as i64;
                    g.p("shift_h", d as f64);
                    vec![d; g.len()]
                }
                _ => {
                    let r = g.signed("rate_h_per_h", 0.02, 0.1);
                    (0..g.len()).map(|t| round(r * (t + 1) as f64) as i64).collect()
                }
            };
            let (s, n) = (g.s, g.q.len() as i64);
            let (q0, h0) = (g.q.to_vec(), g.h.to_vec());
            let src = |t: usize| (t as i64 + s as i64 + shift_at[t]).clamp(0, n - 1) as usize;
            g.each(ch, |t, _| q0[src(t)], |t, _| h0[src(t)]);
            ch
        }
        Quantization => {
            let ch = random_channels(g.rng);
            match variant {
                "significant_digits" => {
                    let d = g.ui("digits", 1, 2) as f64;
                    let q = |x: f64| {
                        if x <= 0.0 {
                            return x;
                        }
                        let mag = floor(log2(x) / log2(10.0));
                        let step = powf(10.0, mag - d + 1.0);
                        round(x / step) * step
                    };
                    g.each(ch, |_, x| q(x), |_, x| q(x))
                }
                _ => {
                    let k = g.u("step_sigmas", 0.2, 1.0);
                    let (dq, dh) = (k * g.sd('q'), k * g.sd('h'));
                    let trunc = variant == "truncation";
                    let f = move |x: f64, d: f64| if trunc { floor(x / d) * d } else { round(x / d) * d };
                    g.each(ch, |_, x| f(x, dq), |_, x| f(x, dh))
                }
            }
            ch
        }
        UnitMismatch => {
            let to_si = coin(g.rng, 0.5);
            g.p("to_si", f64::from(u8::from(to_si)));
            let conv = |x: f64, k: f64| if to_si { x / k } else { x * k };
            let ch = match variant {
                "stage_m_ft" => Channels::Stage,
                "discharge_cms_cfs" => Channels::Discharge,
                _ => Channels::Both,
            };
            g.each(ch, |_, x| conv(x, CFS_PER_CMS), |_, x| conv(x, FT_PER_M));
            ch
        }
        Splice => {
            let n = g.q.len();
            let len = g.len();
            let mut src = g.s;
            if n > len {
                for _ in 0..100 {
                    src = uniform_int(g.rng, 0, n - len);
                    if src.abs_diff(g.s) >= len / 2 + 1 {
                        break;
                    }
                }
            }
            g.p("source_start", src as f64);
            let ch = if variant == "single_channel" {
                if coin(g.rng, 0.5) {
                    Channels::Discharge
                } else {
                    Channels::Stage
                }
            } else {
                Channels::Both
            };
            let (q0, h0, s) = (g.q.to_vec(), g.h.to_vec(), g.s);
            let matched = variant == "level_matched";
            let (oq, oh) = if matched {
                (q0[s] - q0[src], h0[s] - h0[src])
            } else {
                (0.0, 0.0)
            };
            g.each(ch, |t, _| q0[src + t] + oq, |t, _| h0[src + t] + oh);
            ch
        }
        Warp => {
            let ch = random_channels(g.rng);
            let (q0, h0, s) = (g.q.to_vec(), g.h.to_vec(), g.s);
            let map: Vec<f64> = match variant {
                "stretch" => {
                    let w = g.u("w", 0.8, 0.95);
                    (0..g.len()).map(|t| s as f64 + t as f64 * w).collect()
                }
                "compress" => {
                    let w = g.u("w", 1.05, 1.2);
                    (0..g.len()).map(|t| s as f64 + t as f64 * w).collect()
                }
                _ => {
                    let c = g.signed("curvature", 0.1, 0.3);
                    (0..g.len())
                        .map(|t| s as f64 + t as f64 + c * t as f64 * (l - t as f64) / l)
                        .collect()
                }
            };
            g.each(ch, |t, _| interp(&q0, map[t]), |t, _| interp(&h0, map[t]));
            ch
        }
        NoiseBurst => {
            let ch = random_channels(g.rng);
            let k = g.u("noise_sigmas", 0.2, 1.0);
            let (nq, nh) = (k * g.sd('q'), k * g.sd('h'));
            let len = g.len();
            let draws: Vec<(f64, f64)> = (0..len).map(|_| (normal(g.rng), normal(g.rng))).collect();
            match variant {
                "white" => g.each(ch, |t, x| x + nq * draws[t].0, |t, x| x + nh * draws[t].1),
                "multiplicative" => {
                    let r = g.u("rel_sd", 0.02, 0.1);
                    g.each(ch, |t, x| x * (1.0 + r * draws[t].0), |t, x| x * (1.0 + r * draws[t].1))
                }
                "enveloped" => {
                    let env = |t: usize| {
                        let v = sin(core::f64::consts::PI * (t as f64 + 0.5) / l);
                        v * v
                    };
                    g.each(
                        ch,
                        |t, x| x + nq * draws[t].0 * env(t),
                        |t, x| x + nh * draws[t].1 * env(t),
                    )
                }
                _ => {
                    let hits: Vec<f64> = (0..len)
                        .map(|i| {
                            if i == len / 2 || coin(g.rng, 0.3) {
                                sign(g.rng) * uniform(g.rng, 1.0, 3.0)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let (sq, sh) = (g.sd('q'), g.sd('h'));
                    g.each(ch, |t, x| x + hits[t] * sq, |t, x| x + hits[t] * sh)
                }
            }
            ch
        }
        GateOperation => {
            let closure = variant == "closure";
            let u = if closure {
                g.u("fraction", 0.2, 0.6)
            } else {
                g.u("fraction", 0.2, 1.0)
            };
            let (dq, dh) = (u * g.sc.q_mean.max(g.sc.q_sd), 2.0 * u * g.sc.h_sd);
            let shape: Vec<f64> = match variant {
                "ramped_release" => {
                    let r = (l / 4.0).max(1.0);
                    (0..g.len())
                        .map(|t| ((t + 1) as f64 / r).min(1.0).min((l - t as f64) / r))
                        .collect()
                }
                "pulsed" => {
                    let p = g.ui("period_h", 6, 24);
                    (0..g.len())
                        .map(|t| if (t % p) < p / 2 || t == 0 { 1.0 } else { 0.0 })
                        .collect()
                }
                _ => vec![1.0; g.len()],
            };
            if closure {
                g.each(
                    Channels::Both,
                    |t, x| x * (1.0 - u * shape[t]),
                    |t, x| x - dh * shape[t],
                )
            } else {
                g.each(Channels::Both, |t, x| x + dq * shape[t], |t, x| x + dh * shape[t])
            }
            Channels::Both
        }
    }
}

/// Draws the sequence composition and applies it in physical space, then
/// renormalizes the window (with clipping) from the edited traces.
pub fn inject_test<R: Rng + ?Sized>(
    window: &Window,
    clim: &MonthlyClimatology,
    cfg: &TestInjectConfig,
    seed: u64,
    rng: &mut R,
) -> Result<(Window, CorruptionRecord)> {
    let n = window.len();
    if n == 0 {
        return Err(Error::invalid("empty window"));
    }
    let eligible = cfg.eligible();
    let single = coin(rng, cfg.single_type_prob);
    let n_types = if single {
        1
    } else {
        uniform_int(rng, cfg.compound_types[0], cfg.compound_types[1]).min(eligible.len())
    };
    let mut types: Vec<AnomalyType> = Vec::with_capacity(n_types);
    while types.len() < n_types {
        let t = eligible[uniform_int(rng, 0, eligible.len() - 1)];
        if !types.contains(&t) {
            types.push(t);
        }
    }

    let (q_mean, q_sd) = scale_of(&window.discharge);
    let (h_mean, h_sd) = scale_of(&window.stage);
    let scales = Scales {
        q_mean,
        q_sd,
        h_mean,
        h_sd,
    };
    let mut q = window.discharge.clone();
    let mut h = window.stage.clone();
    let mut flags = vec![false; n];
    let mut labels: Vec<Option<u8>> = vec![None; n];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut segments = Vec::new();

    for &ty in &types {
        let [lo, hi] = cfg.duration_range(ty.regime());
        let hi = hi.min(cfg.max_segment_h).min(n).max(lo.min(n));
        let len = uniform_int(rng, lo.min(n), hi);
        let start = if !spans.is_empty() && coin(rng, cfg.overlap_prob) {
            let (ps, pe) = spans[uniform_int(rng, 0, spans.len() - 1)];
            let a = (ps + 1).saturating_sub(len);
            let b = (pe - 1).min(n - len);
            uniform_int(rng, a.min(b), b)
        } else {
            free_slot(&spans, len, n, cfg.placement_draws, rng).unwrap_or_else(|| uniform_int(rng, 0, n - len))
        };
        let end = start + len;
        let variants = ty.variants();
        let variant = variants[uniform_int(rng, 0, variants.len() - 1)];
        let (q_before, h_before) = (q.clone(), h.clone());
        let mut seg = Seg {
            q: &mut q,
            h: &mut h,
            s: start,
            e: end,
            sc: &scales,
            rng,
            params: BTreeMap::new(),
        };
        let channels = apply_type(ty, variant, &mut seg);
        let params = seg.params;
        for t in start..end {
            for v in [&mut q[t], &mut h[t]] {
                if !is_missing(*v) && *v < 0.0 {
                    *v = 0.0;
                }
            }
            if !q[t].is_finite() && !is_missing(q[t]) || !h[t].is_finite() && !is_missing(h[t]) {
                return Err(Error::Overflow {
                    value: if q[t].is_finite() { h[t] } else { q[t] },
                });
            }
            let changed = !same(q[t], q_before[t]) || !same(h[t], h_before[t]);
            if changed || ty.masks_full_segment() {
                flags[t] = true;
                labels[t].get_or_insert(ty.id());
            }
        }
        spans.push((start, end));
        segments.push(SegmentRecord {
            type_id: ty.id(),
            type_name: String::from(ty.name()),
            variant: String::from(variant),
            start,
            end,
            channels,
            params,
        });
    }

    let mut out = window.clone();
    out.discharge = q;
    out.stage = h;
    refresh_dynamic_channels(&mut out, clim);
    let count = flags.iter().filter(|f| **f).count();
    let record = CorruptionRecord {
        mask: AnomalyMask {
            flags,
            type_labels: Some(labels),
        },
        segments,
        seed,
        realized_coverage: count as f64 / n as f64,
        space: Space::Physical,
        composition: if single {
            Composition::Single
        } else {
            Composition::Compound
        },
        tier: None,
        target_coverage: None,
        attempts: 1,
    };
    Ok((out, record))
}

fn free_slot<R: Rng + ?Sized>(
    taken: &[(usize, usize)],
    len: usize,
    n: usize,
    draws: usize,
    rng: &mut R,
) -> Option<usize> {
    let clear = |s: usize| !taken.iter().any(|&(a, b)| s < b && a < s + len);
    for _ in 0..draws {
        let s = uniform_int(rng, 0, n - len);
        if clear(s) {
            return Some(s);
        }
    }
    (0..=n - len).find(|&s| clear(s))
}

fn same(a: f64, b: f64) -> bool {
    a == b || (is_missing(a) && is_missing(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inject::train::tests::window;
    use crate::rng::rng_from_seed;
    use crate::series::MISSING;

    fn clim() -> MonthlyClimatology {
        MonthlyClimatology {
            mu_q: [MISSING; 12],
            sigma_q: [MISSING; 12],
            mu_h: [MISSING; 12],
            sigma_h: [MISSING; 12],
            count_q: [0; 12],
            count_h: [0; 12],
        }
    }

    fn only(t: AnomalyType) -> TestInjectConfig {
        TestInjectConfig {
            types: vec![t],
            single_type_prob: 1.0,
            ..TestInjectConfig::default()
        }
    }

    #[test]
    fn every_type_masks_only_inside_segments() {
        let w = window();
        for ty in AnomalyType::ALL {
            let mut hits = 0;
            for seed in 0..40 {
                let (out, rec) = inject_test(&w, &clim(), &only(ty), seed, &mut rng_from_seed(seed)).unwrap();
                assert_eq!(rec.segments.len(), 1);
                let seg = &rec.segments[0];
                assert_eq!(seg.type_name, ty.name());
                for t in 0..w.len() {
                    let inside = t >= seg.start && t < seg.end;
                    if rec.mask.flags[t] {
                        assert!(inside, "{} flagged outside its segment", ty.name());
                    } else {
                        assert_eq!(out.discharge[t].to_bits(), w.discharge[t].to_bits());
                        assert_eq!(out.stage[t].to_bits(), w.stage[t].to_bits());
                    }
                    assert!(out.discharge[t] >= 0.0 && out.stage[t] >= 0.0);
                }
                hits += usize::from(rec.mask.count() > 0);
            }
            assert!(hits >= 30, "{} rarely changes anything ({hits}/40)", ty.name());
        }
    }

    #[test]
    fn normalized_channels_are_clipped() {
        let w = window();
        for seed in 0..50 {
            let (out, _) = inject_test(
                &w,
                &clim(),
                &TestInjectConfig::default(),
                seed,
                &mut rng_from_seed(seed),
            )
            .unwrap();
            for row in &out.features {
                assert!(row.iter().all(|v| v.is_finite() && v.abs() <= 3.0 + 1e-12));
            }
        }
    }

    #[test]
    fn compound_uses_distinct_types() {
        let w = window();
        let cfg = TestInjectConfig {
            single_type_prob: 0.0,
            ..TestInjectConfig::default()
        };
        for seed in 0..50 {
            let (_, rec) = inject_test(&w, &clim(), &cfg, seed, &mut rng_from_seed(seed)).unwrap();
            assert_eq!(rec.composition, Composition::Compound);
            let ids = rec.type_ids();
            assert!((2..=3).contains(&ids.len()));
            assert_eq!(ids.len(), rec.segments.len());
            for s in &rec.segments {
                assert!(s.end - s.start <= cfg.max_segment_h);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let w = window();
        let cfg = TestInjectConfig::default();
        let a = inject_test(&w, &clim(), &cfg, 5, &mut rng_from_seed(5)).unwrap();
        let b = inject_test(&w, &clim(), &cfg, 5, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn type_ids_round_trip() {
        for t in AnomalyType::ALL {
            assert_eq!(AnomalyType::from_id(t.id()), Some(t));
            assert_eq!(AnomalyType::parse(t.name()), Some(t));
        }
    }
}
