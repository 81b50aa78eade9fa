// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage functions over in-memory data. The CLI persists their outputs
//! between invocations; tests call them directly.

use std::collections::BTreeMap;

use hydroqc_core::detect::{
    extract_detection_features, head_detect, run_baseline, train_head, Baseline, DetectionResult, Executor, MlpHead,
    TrainHistory, TrainSample,
};
use hydroqc_core::eval::{build_report, BenchmarkReport, ReportMeta, WindowEval};
use hydroqc_core::inject::{corrupt_training, inject_test, Composition, CorruptionRecord};
use hydroqc_core::labels::{
    correction_fraction_filter, correction_magnitude, pattern_labels, station_missing_filter, station_missing_fraction,
    weak_labels, window_quality, WindowQualityReport,
};
use hydroqc_core::normalize::{build_features, fit_site_stats, FittedStats, SiteStats};
use hydroqc_core::qc::{pooled_roc_theta, run_qc, QcContext, QcReport};
use hydroqc_core::rng::{derive_rng, derive_seed, rng_from_seed};
use hydroqc_core::series::missing_vec;
use hydroqc_core::window::{segment_windows, WINDOW_LEN};
use hydroqc_core::{HourlySeries, PairedSeries, Partition, SiteMeta, Timestamp, Window, WindowSpan};
use serde::{Deserialize, Serialize};

use crate::config::{hash_json, RunConfig};
use crate::error::{Error, Result};

pub const SYNTHETIC_TRACK: &str = "synthetic";
pub const WEAK_TRACK: &str = "weak";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub sites: Vec<SiteMeta>,
    pub series: BTreeMap<String, HourlySeries>,
    pub paired: BTreeMap<String, PairedSeries>,
}

impl Corpus {
    pub fn meta(&self, id: &str) -> Option<&SiteMeta> {
        self.sites.iter().find(|s| s.site_id == id)
    }

    pub fn fingerprint(&self) -> String {
        hash_json(&(&self.sites, &self.series, &self.paired))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcOutput {
    pub global_theta: Option<f64>,
    pub series: BTreeMap<String, HourlySeries>,
    pub reports: Vec<QcReport>,
}

impl QcOutput {
    pub fn accepted(&self, id: &str) -> Option<&HourlySeries> {
        let ok = self.reports.iter().any(|r| r.site_id == id && r.accepted);
        ok.then(|| self.series.get(id)).flatten()
    }
}

/// QC for every site. The rate-of-change threshold is pooled over the
/// training sites' raw records.
pub fn qc_stage<E: Executor>(corpus: &Corpus, cfg: &RunConfig, exec: &E) -> Result<QcOutput> {
    let train = corpus
        .sites
        .iter()
        .filter(|m| m.partition == Partition::Train)
        .filter_map(|m| corpus.series.get(&m.site_id));
    let global_theta = pooled_roc_theta(train, &cfg.qc);
    let ids: Vec<&SiteMeta> = corpus
        .sites
        .iter()
        .filter(|m| corpus.series.contains_key(&m.site_id))
        .collect();
    let ctx = QcContext {
        global_theta,
        extrema: None,
    };
    let done = exec.map(ids.len(), |i| {
        let s = &corpus.series[&ids[i].site_id];
        let mut rng = derive_rng(cfg.seed, &["qc", &s.site_id]);
        run_qc(s, &cfg.qc, &ctx, &mut rng)
    });
    let mut series = BTreeMap::new();
    let mut reports = Vec::new();
    for (s, r) in done {
        if !r.accepted {
            log::warn!("{}: rejected by QC (completeness {:.3})", r.site_id, r.completeness);
        }
        series.insert(s.site_id.clone(), s);
        reports.push(r);
    }
    Ok(QcOutput {
        global_theta,
        series,
        reports,
    })
}

pub fn stats_stage(corpus: &Corpus, qc: &QcOutput, cfg: &RunConfig) -> Result<FittedStats> {
    let pairs: Vec<(&SiteMeta, &HourlySeries)> = corpus
        .sites
        .iter()
        .filter_map(|m| qc.accepted(&m.site_id).map(|s| (m, s)))
        .collect();
    if !pairs.iter().any(|(m, _)| m.partition == Partition::Train) {
        return Err(Error::data("no accepted training site to fit statistics on"));
    }
    Ok(fit_site_stats(&pairs, &cfg.norm)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSpans {
    pub site_id: String,
    pub partition: Partition,
    pub spans: Vec<WindowSpan>,
}

fn observed_fraction(q: &[f64], h: &[f64]) -> f64 {
    let ok = q.iter().zip(h).filter(|(a, b)| a.is_finite() && b.is_finite()).count();
    ok as f64 / q.len().max(1) as f64
}

/// Window placements over accepted sites, skipping windows observed less
/// than `min_observed`.
pub fn span_stage(corpus: &Corpus, qc: &QcOutput, stride: usize, min_observed: f64) -> Vec<SiteSpans> {
    corpus
        .sites
        .iter()
        .filter_map(|m| {
            let s = qc.accepted(&m.site_id)?;
            let spans = segment_windows(s, stride)
                .into_iter()
                .filter(|sp| {
                    let r = sp.offset..sp.offset + WINDOW_LEN;
                    observed_fraction(&s.discharge[r.clone()], &s.stage[r]) >= min_observed
                })
                .collect();
            Some(SiteSpans {
                site_id: m.site_id.clone(),
                partition: m.partition,
                spans,
            })
        })
        .collect()
}

/// Site statistics for every site in `ids`, fallback stats for sites that
/// were not fitted.
pub fn site_stats<'a>(
    corpus: &Corpus,
    stats: &FittedStats,
    ids: impl Iterator<Item = &'a str>,
) -> Result<BTreeMap<String, SiteStats>> {
    let mut out = BTreeMap::new();
    for id in ids {
        if out.contains_key(id) {
            continue;
        }
        let meta = corpus
            .meta(id)
            .ok_or_else(|| Error::data(format!("site {id} is not in the site table")))?;
        out.insert(id.to_string(), stats.stats_for(meta));
    }
    Ok(out)
}

fn window_at(
    series: &HourlySeries,
    span: WindowSpan,
    meta: &SiteMeta,
    st: &SiteStats,
    stats: &FittedStats,
    cfg: &RunConfig,
) -> Result<Window> {
    let r = span.offset..span.offset + WINDOW_LEN;
    Ok(build_features(
        &series.discharge[r.clone()],
        &series.stage[r],
        span.start,
        meta,
        st,
        &stats.global,
        &cfg.norm,
    )?)
}

/// One test-injected window: the corrupted physical traces and the record
/// of what was injected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedWindow {
    pub site_id: String,
    pub partition: Partition,
    pub offset: usize,
    pub start: Timestamp,
    #[serde(with = "missing_vec")]
    pub discharge: Vec<f64>,
    #[serde(with = "missing_vec")]
    pub stage: Vec<f64>,
    pub record: CorruptionRecord,
}

impl InjectedWindow {
    pub fn key(&self) -> String {
        format!("{}@{}", self.site_id, self.offset)
    }

    pub fn observed(&self) -> Vec<bool> {
        self.discharge
            .iter()
            .zip(&self.stage)
            .map(|(q, h)| q.is_finite() && h.is_finite())
            .collect()
    }

    pub fn window(&self, corpus: &Corpus, st: &SiteStats, stats: &FittedStats, cfg: &RunConfig) -> Result<Window> {
        let meta = corpus
            .meta(&self.site_id)
            .ok_or_else(|| Error::data(format!("unknown site {}", self.site_id)))?;
        Ok(build_features(
            &self.discharge,
            &self.stage,
            self.start,
            meta,
            st,
            &stats.global,
            &cfg.norm,
        )?)
    }

    pub fn eval(&self) -> WindowEval {
        let single_type = match self.record.composition {
            Composition::Single => self.record.type_ids().first().copied(),
            _ => None,
        };
        WindowEval {
            site_id: self.site_id.clone(),
            start: self.start,
            labels: self.record.mask.flags.clone(),
            labeled: self.observed(),
            single_type,
            magnitude: None,
        }
    }
}

fn flat_spans(spans: &[SiteSpans], keep: impl Fn(Partition) -> bool) -> Vec<(&SiteSpans, WindowSpan)> {
    spans
        .iter()
        .filter(|s| keep(s.partition))
        .flat_map(|s| s.spans.iter().map(move |sp| (s, *sp)))
        .collect()
}

/// Test-injector corruption of every evaluation window. Each window's seed
/// is derived from the master seed and its (site, offset) key.
pub fn inject_test_stage<E: Executor>(
    corpus: &Corpus,
    qc: &QcOutput,
    stats: &FittedStats,
    spans: &[SiteSpans],
    cfg: &RunConfig,
    exec: &E,
) -> Result<Vec<InjectedWindow>> {
    let items = flat_spans(spans, |_| true);
    let st = site_stats(corpus, stats, spans.iter().map(|s| s.site_id.as_str()))?;
    exec.map(items.len(), |i| {
        let (site, span) = items[i];
        let meta = corpus.meta(&site.site_id).expect("span sites come from the corpus");
        let series = &qc.series[&site.site_id];
        let sst = &st[&site.site_id];
        let w = window_at(series, span, meta, sst, stats, cfg)?;
        let seed = derive_seed(cfg.seed, &["inject-test", &site.site_id, &span.offset.to_string()]);
        let mut rng = rng_from_seed(seed);
        let (cw, record) = inject_test(&w, &sst.climatology, &cfg.test_inject, seed, &mut rng)?;
        Ok(InjectedWindow {
            site_id: site.site_id.clone(),
            partition: site.partition,
            offset: span.offset,
            start: span.start,
            discharge: cw.discharge,
            stage: cw.stage,
            record,
        })
    })
    .into_iter()
    .collect()
}

/// Training-injector record for one training window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCorruption {
    pub site_id: String,
    pub offset: usize,
    pub record: CorruptionRecord,
}

pub fn inject_train_stage<E: Executor>(
    corpus: &Corpus,
    qc: &QcOutput,
    stats: &FittedStats,
    spans: &[SiteSpans],
    cfg: &RunConfig,
    exec: &E,
) -> Result<Vec<TrainCorruption>> {
    let items = flat_spans(spans, |p| p == Partition::Train);
    let st = site_stats(corpus, stats, items.iter().map(|(s, _)| s.site_id.as_str()))?;
    exec.map(items.len(), |i| {
        let (site, span) = items[i];
        let meta = corpus.meta(&site.site_id).expect("span sites come from the corpus");
        let w = window_at(&qc.series[&site.site_id], span, meta, &st[&site.site_id], stats, cfg)?;
        let seed = derive_seed(cfg.seed, &["inject-train", &site.site_id, &span.offset.to_string()]);
        let mut rng = rng_from_seed(seed);
        let (_, record) = corrupt_training(&w, &cfg.train_inject, seed, &mut rng);
        Ok(TrainCorruption {
            site_id: site.site_id.clone(),
            offset: span.offset,
            record,
        })
    })
    .into_iter()
    .collect()
}

/// Traces a detector sees, with enough context to rebuild its window.
pub trait DetectInput: Sync {
    fn site_id(&self) -> &str;
    fn offset(&self) -> usize;
    fn traces(&self) -> (&[f64], &[f64]);
    fn start(&self) -> Timestamp;
}

impl DetectInput for InjectedWindow {
    fn site_id(&self) -> &str {
        &self.site_id
    }
    fn offset(&self) -> usize {
        self.offset
    }
    fn traces(&self) -> (&[f64], &[f64]) {
        (&self.discharge, &self.stage)
    }
    fn start(&self) -> Timestamp {
        self.start
    }
}

fn rebuild<W: DetectInput>(
    w: &W,
    corpus: &Corpus,
    st: &SiteStats,
    stats: &FittedStats,
    cfg: &RunConfig,
) -> Result<Window> {
    let meta = corpus
        .meta(w.site_id())
        .ok_or_else(|| Error::data(format!("unknown site {}", w.site_id())))?;
    let (q, h) = w.traces();
    Ok(build_features(q, h, w.start(), meta, st, &stats.global, &cfg.norm)?)
}

/// Detections per detector name, each aligned with `windows`.
pub type Detections = BTreeMap<String, Vec<DetectionResult>>;

pub fn baseline_stage<E: Executor, W: DetectInput>(
    corpus: &Corpus,
    stats: &FittedStats,
    windows: &[W],
    baselines: &[Baseline],
    cfg: &RunConfig,
    exec: &E,
) -> Result<Detections> {
    let st = site_stats(corpus, stats, windows.iter().map(|w| w.site_id()))?;
    let per_window: Vec<Result<Vec<DetectionResult>>> = exec.map(windows.len(), |i| {
        let iw = &windows[i];
        let sst = &st[iw.site_id()];
        let w = rebuild(iw, corpus, sst, stats, cfg)?;
        let off = iw.offset().to_string();
        baselines
            .iter()
            .map(|b| {
                let seed = derive_seed(cfg.seed, &["detect", b.name(), iw.site_id(), &off]);
                Ok(run_baseline(*b, &w, Some(&sst.envelope), &cfg.detect.baseline, seed)?)
            })
            .collect()
    });
    let mut out: Detections = baselines
        .iter()
        .map(|b| (b.name().to_string(), Vec::with_capacity(windows.len())))
        .collect();
    for rs in per_window {
        for r in rs? {
            out.get_mut(&r.detector).expect("detector registered").push(r);
        }
    }
    Ok(out)
}

fn sample<W: DetectInput>(w: &W, labels: Vec<bool>, cfg: &RunConfig) -> Result<TrainSample> {
    let (q, h) = w.traces();
    let r = cfg.detect.reconstructor.reconstruct_traces(q, h)?;
    let labeled = q.iter().zip(h).map(|(a, b)| a.is_finite() && b.is_finite()).collect();
    Ok(TrainSample {
        features: extract_detection_features(q, h, &r),
        labels,
        labeled,
    })
}

/// Head trained on test-injected windows of training sites, early-stopped
/// and thresholded on validation sites.
pub fn train_head_stage<E: Executor>(
    windows: &[InjectedWindow],
    cfg: &RunConfig,
    exec: &E,
) -> Result<(MlpHead, TrainHistory)> {
    let build = |part: Partition| -> Result<Vec<TrainSample>> {
        let ws: Vec<&InjectedWindow> = windows.iter().filter(|w| w.partition == part).collect();
        exec.map(ws.len(), |i| sample(ws[i], ws[i].record.mask.flags.clone(), cfg))
            .into_iter()
            .collect()
    };
    let train = build(Partition::Train)?;
    let val = build(Partition::Validation)?;
    if train.is_empty() {
        return Err(Error::data("no training-site windows to train the head on"));
    }
    let seed = derive_seed(cfg.seed, &["train-head"]);
    Ok(train_head(&train, &val, &cfg.head, seed, exec)?)
}

pub fn head_stage<E: Executor, W: DetectInput>(
    corpus: &Corpus,
    stats: &FittedStats,
    windows: &[W],
    head: &MlpHead,
    cfg: &RunConfig,
    exec: &E,
) -> Result<Vec<DetectionResult>> {
    let st = site_stats(corpus, stats, windows.iter().map(|w| w.site_id()))?;
    exec.map(windows.len(), |i| {
        let iw = &windows[i];
        let w = rebuild(iw, corpus, &st[iw.site_id()], stats, cfg)?;
        let seed = derive_seed(cfg.seed, &["head-mc", iw.site_id(), &iw.offset().to_string()]);
        Ok(head_detect(
            &w,
            head,
            &cfg.detect.reconstructor,
            cfg.detect.mc_passes,
            seed,
        )?)
    })
    .into_iter()
    .collect()
}

/// Per-site outcome of the paired-archive filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakSite {
    pub site_id: String,
    pub missing_fraction: f64,
    pub anomalous_fraction: f64,
    pub pattern_fraction: f64,
    pub windows: usize,
    pub windows_passing: usize,
    /// Windows whose corrected fraction fell outside the accepted range.
    pub windows_fraction_rejected: usize,
    pub accepted: bool,
    pub reason: Option<String>,
}

/// A raw-archive window with its weak and pattern label tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakWindow {
    pub site_id: String,
    pub offset: usize,
    pub start: Timestamp,
    #[serde(with = "missing_vec")]
    pub discharge: Vec<f64>,
    #[serde(with = "missing_vec")]
    pub stage: Vec<f64>,
    pub labels: Vec<bool>,
    pub labeled: Vec<bool>,
    pub pattern: Vec<bool>,
    #[serde(with = "missing_vec")]
    pub magnitude: Vec<f64>,
    pub quality: WindowQualityReport,
}

impl WeakWindow {
    pub fn eval(&self) -> WindowEval {
        WindowEval {
            site_id: self.site_id.clone(),
            start: self.start,
            labels: self.labels.clone(),
            labeled: self.labeled.clone(),
            single_type: None,
            magnitude: Some(self.magnitude.clone()),
        }
    }
}

impl DetectInput for WeakWindow {
    fn site_id(&self) -> &str {
        &self.site_id
    }
    fn offset(&self) -> usize {
        self.offset
    }
    fn traces(&self) -> (&[f64], &[f64]) {
        (&self.discharge, &self.stage)
    }
    fn start(&self) -> Timestamp {
        self.start
    }
}

fn frac(v: &[bool]) -> f64 {
    v.iter().filter(|b| **b).count() as f64 / v.len().max(1) as f64
}

/// Weak labels for every paired archive that passes the station filters,
/// cut into evaluation windows that pass the window-quality checks on the
/// corrected record.
pub fn labels_stage<E: Executor>(
    corpus: &Corpus,
    cfg: &RunConfig,
    exec: &E,
) -> Result<(Vec<WeakSite>, Vec<WeakWindow>)> {
    let lc = &cfg.labels;
    let ids: Vec<&String> = corpus.paired.keys().collect();
    for id in &ids {
        if corpus.meta(id).is_none() {
            return Err(Error::data(format!("paired archive {id} has no row in the site table")));
        }
    }
    let per_site = exec.map(ids.len(), |i| {
        let p = &corpus.paired[ids[i]];
        let track = weak_labels(p, &lc.weak);
        let pattern = pattern_labels(p, &lc.pattern);
        let mut site = WeakSite {
            site_id: p.site_id.clone(),
            missing_fraction: station_missing_fraction(p),
            anomalous_fraction: track.anomalous_fraction(),
            pattern_fraction: frac(&pattern.mask.flags),
            windows: 0,
            windows_passing: 0,
            windows_fraction_rejected: 0,
            accepted: false,
            reason: None,
        };
        if !station_missing_filter(p, &lc.weak) {
            site.reason = Some("too many missing timesteps".into());
            return (site, Vec::new());
        }
        let corrected = p.corrected();
        let raw = p.raw();
        let mut out = Vec::new();
        for span in segment_windows(&raw, cfg.windows.eval_stride) {
            site.windows += 1;
            let r = span.offset..span.offset + WINDOW_LEN;
            if !correction_fraction_filter(&track.slice(span.offset, WINDOW_LEN), &lc.weak) {
                site.windows_fraction_rejected += 1;
                continue;
            }
            let mut rng = derive_rng(cfg.seed, &["quality", &p.site_id, &span.offset.to_string()]);
            let quality = window_quality(
                &corrected.discharge[r.clone()],
                &corrected.stage[r.clone()],
                &lc.quality,
                &mut rng,
            );
            let negative = raw.discharge[r.clone()]
                .iter()
                .chain(&raw.stage[r.clone()])
                .any(|v| *v < 0.0);
            if !quality.pass || negative {
                continue;
            }
            site.windows_passing += 1;
            out.push(WeakWindow {
                site_id: p.site_id.clone(),
                offset: span.offset,
                start: span.start,
                discharge: raw.discharge[r.clone()].to_vec(),
                stage: raw.stage[r.clone()].to_vec(),
                labels: track.mask.flags[r.clone()].to_vec(),
                labeled: track.labeled[r.clone()].to_vec(),
                pattern: pattern.mask.flags[r.clone()].to_vec(),
                magnitude: r
                    .map(|k| correction_magnitude(p, k, lc.weak.eps).unwrap_or(f64::NAN))
                    .collect(),
                quality,
            });
        }
        site.accepted = true;
        (site, out)
    });
    let mut sites = Vec::new();
    let mut windows = Vec::new();
    for (s, w) in per_site {
        sites.push(s);
        windows.extend(w);
    }
    Ok((sites, windows))
}

pub fn report_meta(corpus: &Corpus, cfg: &RunConfig) -> ReportMeta {
    let mut seeds = BTreeMap::new();
    seeds.insert("master".to_string(), cfg.seed);
    seeds.insert("train-head".to_string(), derive_seed(cfg.seed, &["train-head"]));
    ReportMeta {
        corpus_fingerprint: corpus.fingerprint(),
        config_hash: cfg.hash(),
        injector_config_hash: hash_json(&cfg.test_inject),
        seeds,
    }
}

/// Benchmark report over the test-partition windows.
pub fn evaluate_synthetic(windows: &[InjectedWindow], results: &Detections, meta: ReportMeta) -> BenchmarkReport {
    let evals: Vec<WindowEval> = windows.iter().map(|w| w.eval()).collect();
    build_report(&evals, results, meta)
}

pub fn evaluate_weak(windows: &[WeakWindow], results: &Detections, meta: ReportMeta) -> BenchmarkReport {
    let evals: Vec<WindowEval> = windows.iter().map(|w| w.eval()).collect();
    build_report(&evals, results, meta)
}

/// Test-partition windows in their stored order.
pub fn test_windows(all: &[InjectedWindow]) -> Vec<InjectedWindow> {
    all.iter().filter(|w| w.partition == Partition::Test).cloned().collect()
}
