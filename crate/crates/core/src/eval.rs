// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detection and reconstruction metrics, stratified breakdowns and the
//! benchmark report.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detect::DetectionResult;
use crate::inject::AnomalyType;
use crate::math::{abs, average_ranks, erfc, sqrt, true_runs};
use crate::time::{Season, Timestamp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts over timesteps where `labeled` is true (all when `None`).
    pub fn from_flags(flags: &[bool], labels: &[bool], labeled: Option<&[bool]>) -> Self {
        assert_eq!(flags.len(), labels.len(), "flags and labels differ in length");
        let mut c = Confusion::default();
        for t in 0..flags.len() {
            if labeled.is_some_and(|l| !l[t]) {
                continue;
            }
            match (flags[t], labels[t]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn scores(&self) -> Prf1 {
        let ratio = |a: u64, b: u64| if b == 0 { None } else { Some(a as f64 / b as f64) };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        Prf1 {
            precision: p.unwrap_or(0.0),
            recall: r.unwrap_or(0.0),
            f1: f.unwrap_or(0.0),
            degenerate: p.is_none() || r.is_none(),
            confusion: *self,
        }
    }
}

/// Precision, recall and F1; zero denominators give 0 and set `degenerate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
    pub confusion: Confusion,
}

pub fn prf1(flags: &[bool], labels: &[bool]) -> Prf1 {
    Confusion::from_flags(flags, labels, None).scores()
}

pub fn prf1_labeled(flags: &[bool], labels: &[bool], labeled: &[bool]) -> Prf1 {
    Confusion::from_flags(flags, labels, Some(labeled)).scores()
}

/// Mann-Whitney estimate of `P(score+ > score-)` with ties counted one
/// half. Non-finite scores are skipped; `None` without both classes.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (s, y): (Vec<f64>, Vec<bool>) = scores
        .iter()
        .zip(labels)
        .filter(|(s, _)| s.is_finite())
        .map(|(s, y)| (*s, *y))
        .unzip();
    let n1 = y.iter().filter(|&&b| b).count();
    let n0 = y.len() - n1;
    if n1 == 0 || n0 == 0 {
        return None;
    }
    let ranks = average_ranks(&s);
    let rsum: f64 = ranks.iter().zip(&y).filter(|(_, &b)| b).map(|(r, _)| r).sum();
    let (n1, n0) = (n1 as f64, n0 as f64);
    Some((rsum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Relative reduction in absolute error, in percent, computed per maximal
/// masked segment and averaged over segments. Segments whose raw error is
/// zero carry no information and are skipped; `None` if none remain.
pub fn error_reduction(raw: &[f64], clean: &[f64], recon: &[f64], mask: &[bool]) -> Option<f64> {
    let mut per_segment = Vec::new();
    for (s, e) in true_runs(mask) {
        let (mut before, mut after) = (0.0, 0.0);
        for t in s..e {
            if raw[t].is_finite() && clean[t].is_finite() && recon[t].is_finite() {
                before += abs(raw[t] - clean[t]);
                after += abs(recon[t] - clean[t]);
            }
        }
        if before > 0.0 {
            per_segment.push(100.0 * (before - after) / before);
        }
    }
    if per_segment.is_empty() {
        None
    } else {
        Some(per_segment.iter().sum::<f64>() / per_segment.len() as f64)
    }
}

/// RMSE over masked and unmasked timesteps separately.
pub fn rmse_segments(pred: &[f64], truth: &[f64], mask: &[bool]) -> (Option<f64>, Option<f64>) {
    let mut acc = [(0.0, 0usize); 2];
    for t in 0..pred.len() {
        if pred[t].is_finite() && truth[t].is_finite() {
            let e = pred[t] - truth[t];
            let a = &mut acc[usize::from(!mask[t])];
            a.0 += e * e;
            a.1 += 1;
        }
    }
    let f = |(s, n): (f64, usize)| (n > 0).then(|| sqrt(s / n as f64));
    (f(acc[0]), f(acc[1]))
}

/// Magnitude bin edges; bins are `(lo, hi]`.
pub const MAGNITUDE_EDGES: [f64; 6] = [0.01, 0.05, 0.10, 0.25, 0.50, 1.00];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinCount {
    pub positives: u64,
    pub detected: u64,
}

impl BinCount {
    pub fn recall(&self) -> Option<f64> {
        (self.positives > 0).then(|| self.detected as f64 / self.positives as f64)
    }
}

pub fn magnitude_bin(m: f64) -> Option<usize> {
    (0..MAGNITUDE_EDGES.len() - 1).find(|&i| m > MAGNITUDE_EDGES[i] && m <= MAGNITUDE_EDGES[i + 1])
}

/// Per-bin counts of labeled positives and how many were flagged.
pub fn magnitude_counts(flags: &[bool], labels: &[bool], labeled: &[bool], magnitude: &[f64]) -> [BinCount; 5] {
    let mut bins = [BinCount::default(); 5];
    for t in 0..flags.len() {
        if !(labeled[t] && labels[t]) {
            continue;
        }
        if let Some(b) = magnitude_bin(magnitude[t]) {
            bins[b].positives += 1;
            bins[b].detected += u64::from(flags[t]);
        }
    }
    bins
}

/// Recall per magnitude bin; empty bins are `None`.
pub fn magnitude_stratified_recall(
    flags: &[bool],
    labels: &[bool],
    labeled: &[bool],
    magnitude: &[f64],
) -> [Option<f64>; 5] {
    magnitude_counts(flags, labels, labeled, magnitude).map(|b| b.recall())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeasonCount {
    pub flagged: u64,
    pub total: u64,
}

/// Flag counts per meteorological season (index order of [`Season`]).
pub fn season_counts(flags: &[bool], start: Timestamp, labeled: Option<&[bool]>) -> [SeasonCount; 4] {
    let mut out = [SeasonCount::default(); 4];
    for (t, &f) in flags.iter().enumerate() {
        if labeled.is_some_and(|l| !l[t]) {
            continue;
        }
        let s = start.plus_hours(t as i64).season().index();
        out[s].total += 1;
        out[s].flagged += u64::from(f);
    }
    out
}

pub fn seasonal_flag_rates(flags: &[bool], start: Timestamp) -> [Option<f64>; 4] {
    season_counts(flags, start, None).map(|c| (c.total > 0).then(|| c.flagged as f64 / c.total as f64))
}

/// Maximal runs binned as shorter than 6 h, 6 to 48 h, longer than 48 h.
pub fn duration_histogram(mask: &[bool]) -> [u64; 3] {
    let mut h = [0u64; 3];
    for (s, e) in true_runs(mask) {
        let d = e - s;
        h[if d < 6 {
            0
        } else if d <= 48 {
            1
        } else {
            2
        }] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Nonzero differences.
    pub n: usize,
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

pub const WILCOXON_EXACT_MAX: usize = 25;

/// Two-sided signed-rank test on paired samples. Zero differences are
/// dropped and tied absolute differences share their average rank. Exact
/// null distribution up to 25 pairs, normal approximation with continuity
/// and tie corrections beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Wilcoxon {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|v| *v != 0.0 && v.is_finite())
        .collect();
    let n = d.len();
    if n == 0 {
        return Wilcoxon {
            n: 0,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
        };
    }
    let ranks = average_ranks(&d.iter().map(|v| abs(*v)).collect::<Vec<_>>());
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        return Wilcoxon {
            n,
            w_plus,
            p_value: exact_p(&ranks, w_plus),
            exact: true,
        };
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    if var <= 0.0 {
        return Wilcoxon {
            n,
            w_plus,
            p_value: 1.0,
            exact: false,
        };
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sqrt(var);
    Wilcoxon {
        n,
        w_plus,
        p_value: erfc(z / core::f64::consts::SQRT_2).min(1.0),
        exact: false,
    }
}

/// Exact two-sided p-value by counting sign patterns over the (possibly
/// tied) ranks. Ranks are halves at worst, so doubled ranks are integers.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r) as usize).collect();
    let total: usize = r2.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &r2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = crate::math::powf(2.0, ranks.len() as f64);
    let w2 = (2.0 * w_plus) as usize;
    let lower: f64 = counts[..=w2].iter().sum();
    let upper: f64 = counts[w2..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

/// One evaluated window: its labels and, when available, stratification
/// keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEval {
    pub site_id: String,
    pub start: Timestamp,
    pub labels: Vec<bool>,
    pub labeled: Vec<bool>,
    /// Set for windows carrying exactly one anomaly type.
    #[serde(default)]
    pub single_type: Option<u8>,
    /// Per-timestep relative correction magnitude; NaN where undefined.
    #[serde(default, with = "crate::series::missing_opt_vec")]
    pub magnitude: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub corpus_fingerprint: String,
    pub config_hash: String,
    pub injector_config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub detector: String,
    pub windows: usize,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub auroc: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub detector: String,
    pub type_id: u8,
    pub type_name: String,
    pub windows: usize,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRow {
    pub detector: String,
    pub lo: f64,
    pub hi: f64,
    pub positives: u64,
    pub detected: u64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeasonRow {
    pub track: String,
    pub season: String,
    pub flagged: u64,
    pub total: u64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationRow {
    pub track: String,
    pub under_6h: u64,
    pub from_6_to_48h: u64,
    pub over_48h: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub a: String,
    pub b: String,
    pub windows: usize,
    pub nonzero: usize,
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
    pub mean_f1_a: f64,
    pub mean_f1_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub meta: ReportMeta,
    pub windows: usize,
    pub labeled_timesteps: u64,
    pub positive_timesteps: u64,
    pub detectors: Vec<DetectorSummary>,
    pub per_type: Vec<TypeRow>,
    pub magnitude: Vec<MagnitudeRow>,
    pub seasonal: Vec<SeasonRow>,
    pub durations: Vec<DurationRow>,
    pub significance: Vec<SignificanceRow>,
    pub notices: Vec<String>,
}

impl BenchmarkReport {
    pub fn detector(&self, name: &str) -> Option<&DetectorSummary> {
        self.detectors.iter().find(|d| d.detector == name)
    }
}

pub const LABEL_TRACK: &str = "labels";

/// Per-window F1 used by the macro average and the significance tests.
/// Windows without labeled positives score 1 when silent and 0 otherwise.
pub fn window_f1(flags: &[bool], w: &WindowEval) -> f64 {
    let s = prf1_labeled(flags, &w.labels, &w.labeled);
    if s.confusion.tp + s.confusion.fn_ == 0 {
        if s.confusion.fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        s.f1
    }
}

fn season_rows<'a>(track: &'a str, counts: &'a [SeasonCount; 4]) -> impl Iterator<Item = SeasonRow> + 'a {
    Season::ALL.iter().map(move |s| {
        let c = counts[s.index()];
        SeasonRow {
            track: track.to_string(),
            season: s.name().to_string(),
            flagged: c.flagged,
            total: c.total,
            rate: if c.total == 0 {
                0.0
            } else {
                c.flagged as f64 / c.total as f64
            },
        }
    })
}

/// Aggregates per-window detection results into the report. Detectors whose
/// results are missing or misaligned are omitted with a notice.
pub fn build_report(
    windows: &[WindowEval],
    results: &BTreeMap<String, Vec<DetectionResult>>,
    meta: ReportMeta,
) -> BenchmarkReport {
    let mut notices = Vec::new();
    let mut usable: Vec<(&String, &Vec<DetectionResult>)> = Vec::new();
    for (name, rs) in results {
        let aligned = rs.len() == windows.len() && rs.iter().zip(windows).all(|(r, w)| r.flags.len() == w.labels.len());
        if aligned {
            usable.push((name, rs));
        } else {
            notices.push(format!(
                "detector {name} omitted: results do not cover the evaluated windows"
            ));
        }
    }

    let mut labeled_timesteps = 0u64;
    let mut positive_timesteps = 0u64;
    let mut label_seasons = [SeasonCount::default(); 4];
    let mut label_durations = [0u64; 3];
    for w in windows {
        for t in 0..w.labels.len() {
            if w.labeled[t] {
                labeled_timesteps += 1;
                positive_timesteps += u64::from(w.labels[t]);
            }
        }
        let sc = season_counts(&w.labels, w.start, Some(&w.labeled));
        for s in 0..4 {
            label_seasons[s].flagged += sc[s].flagged;
            label_seasons[s].total += sc[s].total;
        }
        let masked: Vec<bool> = w.labels.iter().zip(&w.labeled).map(|(a, b)| *a && *b).collect();
        let d = duration_histogram(&masked);
        for i in 0..3 {
            label_durations[i] += d[i];
        }
    }

    let mut detectors = Vec::new();
    let mut per_type = Vec::new();
    let mut magnitude = Vec::new();
    let mut seasonal: Vec<SeasonRow> = season_rows(LABEL_TRACK, &label_seasons).collect();
    let mut durations = vec![DurationRow {
        track: LABEL_TRACK.to_string(),
        under_6h: label_durations[0],
        from_6_to_48h: label_durations[1],
        over_48h: label_durations[2],
    }];
    let mut per_window_f1: Vec<(&String, Vec<f64>)> = Vec::new();

    for (name, rs) in &usable {
        let mut conf = Confusion::default();
        let mut by_type: BTreeMap<u8, (usize, Confusion)> = BTreeMap::new();
        let mut mag = [BinCount::default(); 5];
        let mut seasons = [SeasonCount::default(); 4];
        let mut dur = [0u64; 3];
        let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
        let mut f1s = Vec::with_capacity(windows.len());
        let mut macro_sum = (0.0, 0usize);
        for (r, w) in rs.iter().zip(windows) {
            let c = Confusion::from_flags(&r.flags, &w.labels, Some(&w.labeled));
            conf.add(&c);
            if let Some(ty) = w.single_type {
                let e = by_type.entry(ty).or_default();
                e.0 += 1;
                e.1.add(&c);
            }
            if let Some(m) = &w.magnitude {
                for (b, x) in mag.iter_mut().zip(magnitude_counts(&r.flags, &w.labels, &w.labeled, m)) {
                    b.positives += x.positives;
                    b.detected += x.detected;
                }
            }
            let sc = season_counts(&r.flags, w.start, Some(&w.labeled));
            for s in 0..4 {
                seasons[s].flagged += sc[s].flagged;
                seasons[s].total += sc[s].total;
            }
            let d = duration_histogram(&r.flags);
            for i in 0..3 {
                dur[i] += d[i];
            }
            for t in 0..r.flags.len() {
                if w.labeled[t] {
                    all_scores.push(r.scores[t]);
                    all_labels.push(w.labels[t]);
                }
            }
            if c.tp + c.fn_ > 0 {
                macro_sum.0 += c.scores().f1;
                macro_sum.1 += 1;
            }
            f1s.push(window_f1(&r.flags, w));
        }
        let s = conf.scores();
        detectors.push(DetectorSummary {
            detector: (*name).clone(),
            windows: windows.len(),
            confusion: conf,
            precision: s.precision,
            recall: s.recall,
            micro_f1: s.f1,
            macro_f1: if macro_sum.1 == 0 {
                0.0
            } else {
                macro_sum.0 / macro_sum.1 as f64
            },
            auroc: auroc(&all_scores, &all_labels),
            degenerate: s.degenerate,
        });
        for (ty, (n, c)) in by_type {
            let s = c.scores();
            per_type.push(TypeRow {
                detector: (*name).clone(),
                type_id: ty,
                type_name: AnomalyType::from_id(ty)
                    .map(|t| t.name())
                    .unwrap_or("unknown")
                    .to_string(),
                windows: n,
                confusion: c,
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
            });
        }
        for (i, b) in mag.iter().enumerate() {
            if let Some(rec) = b.recall() {
                magnitude.push(MagnitudeRow {
                    detector: (*name).clone(),
                    lo: MAGNITUDE_EDGES[i],
                    hi: MAGNITUDE_EDGES[i + 1],
                    positives: b.positives,
                    detected: b.detected,
                    recall: rec,
                });
            }
        }
        seasonal.extend(season_rows(name, &seasons));
        durations.push(DurationRow {
            track: (*name).clone(),
            under_6h: dur[0],
            from_6_to_48h: dur[1],
            over_48h: dur[2],
        });
        per_window_f1.push((name, f1s));
    }

    let mut significance = Vec::new();
    for i in 0..per_window_f1.len() {
        for j in i + 1..per_window_f1.len() {
            let (a, fa) = &per_window_f1[i];
            let (b, fb) = &per_window_f1[j];
            let w = wilcoxon_signed_rank(fa, fb);
            let mean = |v: &Vec<f64>| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            significance.push(SignificanceRow {
                a: (*a).clone(),
                b: (*b).clone(),
                windows: fa.len(),
                nonzero: w.n,
                w_plus: w.w_plus,
                p_value: w.p_value,
                exact: w.exact,
                mean_f1_a: mean(fa),
                mean_f1_b: mean(fb),
            });
        }
    }

    BenchmarkReport {
        meta,
        windows: windows.len(),
        labeled_timesteps,
        positive_timesteps,
        detectors,
        per_type,
        magnitude,
        seasonal,
        durations,
        significance,
        notices,
    }
}
