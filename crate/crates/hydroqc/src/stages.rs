// SPDX-License-Identifier: MIT OR Apache-2.0

//! Persisted stages. Each reads the artifacts of the stages before it and
//! writes only its own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hydroqc_core::detect::{
    DetectionResult, Executor, HeadTrainConfig, MlpHead, TrainHistory, FEATURE_LAYOUT_VERSION, HEAD_DETECTOR,
};
use hydroqc_core::eval::BenchmarkReport;
use hydroqc_core::normalize::FittedStats;
use hydroqc_core::qc::QcReport;
use hydroqc_core::{HourlySeries, PairedSeries, SiteMeta};
use serde::{Deserialize, Serialize};

use crate::artifacts::Store;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec::Pool;
use crate::io;
use crate::pipeline::{self, Corpus, DetectInput, Detections, InjectedWindow, QcOutput, SiteSpans, WeakWindow};
use crate::report;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Qc,
    FitStats,
    Windows,
    InjectTrain,
    InjectTest,
    Labels,
    Detect,
    TrainHead,
    Evaluate,
    Report,
    Verify,
}

impl Stage {
    /// Execution order of a full run.
    pub const ALL: [Stage; 12] = [
        Stage::Ingest,
        Stage::Qc,
        Stage::FitStats,
        Stage::Windows,
        Stage::InjectTrain,
        Stage::InjectTest,
        Stage::Labels,
        Stage::Detect,
        Stage::TrainHead,
        Stage::Evaluate,
        Stage::Report,
        Stage::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Qc => "qc",
            Stage::FitStats => "fit-stats",
            Stage::Windows => "windows",
            Stage::InjectTrain => "inject-train",
            Stage::InjectTest => "inject-test",
            Stage::Labels => "labels",
            Stage::Detect => "detect",
            Stage::TrainHead => "train-head",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Verify => "verify",
        }
    }
}

const SITES: &str = "ingest/sites.jsonl";
const SERIES: &str = "ingest/series.jsonl";
const PAIRED: &str = "ingest/paired.jsonl";
const QC_SERIES: &str = "qc/series.jsonl";
const QC_REPORTS: &str = "qc/reports.jsonl";
const QC_CONTEXT: &str = "qc/context.json";
const STATS: &str = "stats/stats.json";
const EVAL_SPANS: &str = "windows/eval_spans.jsonl";
const TRAIN_SPANS: &str = "windows/train_spans.jsonl";
const TRAIN_RECORDS: &str = "inject-train/records.jsonl";
const TEST_WINDOWS: &str = "inject-test/windows.jsonl";
const LABEL_SITES: &str = "labels/sites.jsonl";
const LABEL_WINDOWS: &str = "labels/windows.jsonl";
const DETECT_SYNTH: &str = "detect/synthetic.jsonl";
const DETECT_WEAK: &str = "detect/weak.jsonl";
const HEAD: &str = "head/head.json";
const HEAD_SYNTH: &str = "head/synthetic.jsonl";
const HEAD_WEAK: &str = "head/weak.jsonl";
const EVAL_REPORT: &str = "evaluate/report.json";
const REPORT_DIR: &str = "report";

/// All detector outputs for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDetections {
    pub site_id: String,
    pub offset: usize,
    pub results: Vec<DetectionResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadArtifact {
    pub feature_layout: u32,
    pub training_corpus: String,
    pub hyper: HeadTrainConfig,
    pub head: MlpHead,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reports: Vec<(String, BenchmarkReport)>,
    pub notices: Vec<String>,
}

pub struct Runner<'a> {
    pub cfg: &'a RunConfig,
    pub store: Store,
    pub exec: Pool,
}

fn per_window(windows: &[impl DetectInput], dets: &Detections) -> Vec<WindowDetections> {
    (0..windows.len())
        .map(|i| WindowDetections {
            site_id: windows[i].site_id().to_string(),
            offset: windows[i].offset(),
            results: dets.values().map(|v| v[i].clone()).collect(),
        })
        .collect()
}

fn by_detector(rows: Vec<WindowDetections>, into: &mut Detections) {
    for row in rows {
        for r in row.results {
            into.entry(r.detector.clone()).or_default().push(r);
        }
    }
}

fn aligned(rows: &[WindowDetections], windows: &[impl DetectInput]) -> bool {
    rows.len() == windows.len()
        && rows
            .iter()
            .zip(windows)
            .all(|(r, w)| r.site_id == w.site_id() && r.offset == w.offset())
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a RunConfig, jobs: usize) -> Self {
        Runner {
            cfg,
            store: Store::new(&cfg.paths.output_dir, cfg.hash(), cfg.seed),
            exec: Pool::new(jobs),
        }
    }

    pub fn run(&self, stage: Stage) -> Result<String> {
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Qc => self.qc(),
            Stage::FitStats => self.fit_stats(),
            Stage::Windows => self.windows(),
            Stage::InjectTrain => self.inject_train(),
            Stage::InjectTest => self.inject_test(),
            Stage::Labels => self.labels(),
            Stage::Detect => self.detect(),
            Stage::TrainHead => self.train_head(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
            Stage::Verify => self.verify(),
        }
    }

    fn ingest(&self) -> Result<String> {
        let paths = &self.cfg.paths;
        let open = |p: &Path| fs::File::open(p).map_err(|e| Error::io(p, e));
        let sites = io::parse_site_table(open(&paths.sites)?).map_err(|e| Error::Parse {
            path: paths.sites.clone(),
            msg: e.to_string(),
        })?;
        let series: Vec<Result<HourlySeries>> = self.exec.map(sites.len(), |i| {
            let p = paths.series_dir.join(format!("{}.csv", sites[i].site_id));
            io::parse_timeseries(open(&p)?, &sites[i].site_id).map_err(|e| Error::Parse {
                path: p,
                msg: e.to_string(),
            })
        });
        let series: Vec<HourlySeries> = series.into_iter().collect::<Result<_>>()?;
        let mut paired: Vec<PairedSeries> = Vec::new();
        if let Some(dir) = &paths.paired_dir {
            let mut files: Vec<(String, std::path::PathBuf)> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter_map(|p| {
                    let name = p.file_name()?.to_str()?.to_string();
                    name.strip_suffix(".paired.csv").map(|id| (id.to_string(), p.clone()))
                })
                .collect();
            files.sort();
            for (id, _) in &files {
                if !sites.iter().any(|s| &s.site_id == id) {
                    return Err(Error::data(format!("paired archive {id} has no row in the site table")));
                }
            }
            let parsed: Vec<Result<PairedSeries>> = self.exec.map(files.len(), |i| {
                let (id, p) = &files[i];
                io::parse_paired(open(p)?, id).map_err(|e| Error::Parse {
                    path: p.clone(),
                    msg: e.to_string(),
                })
            });
            paired = parsed.into_iter().collect::<Result<_>>()?;
        }
        self.store.write_jsonl(SITES, &sites)?;
        self.store.write_jsonl(SERIES, &series)?;
        self.store.write_jsonl(PAIRED, &paired)?;
        Ok(format!("{} sites, {} paired archives", sites.len(), paired.len()))
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let sites: Vec<SiteMeta> = self.store.read_jsonl(SITES, "ingest")?;
        let series: Vec<HourlySeries> = self.store.read_jsonl(SERIES, "ingest")?;
        let paired: Vec<PairedSeries> = self.store.read_jsonl(PAIRED, "ingest")?;
        Ok(Corpus {
            sites,
            series: series.into_iter().map(|s| (s.site_id.clone(), s)).collect(),
            paired: paired.into_iter().map(|p| (p.site_id.clone(), p)).collect(),
        })
    }

    fn qc(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let out = pipeline::qc_stage(&corpus, self.cfg, &self.exec)?;
        let series: Vec<&HourlySeries> = out.series.values().collect();
        self.store.write_jsonl(QC_SERIES, &series)?;
        self.store.write_jsonl(QC_REPORTS, &out.reports)?;
        self.store.write_json(QC_CONTEXT, &out.global_theta)?;
        let ok = out.reports.iter().filter(|r| r.accepted).count();
        Ok(format!("{ok} of {} sites accepted", out.reports.len()))
    }

    fn qc_output(&self) -> Result<QcOutput> {
        let series: Vec<HourlySeries> = self.store.read_jsonl(QC_SERIES, "qc")?;
        let reports: Vec<QcReport> = self.store.read_jsonl(QC_REPORTS, "qc")?;
        let global_theta: Option<f64> = self.store.read_json(QC_CONTEXT, "qc")?;
        Ok(QcOutput {
            global_theta,
            series: series.into_iter().map(|s| (s.site_id.clone(), s)).collect(),
            reports,
        })
    }

    fn fit_stats(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let qc = self.qc_output()?;
        let stats = pipeline::stats_stage(&corpus, &qc, self.cfg)?;
        self.store.write_json(STATS, &stats)?;
        Ok(format!(
            "{} training sites fitted, {} dropped",
            stats.sites.len(),
            stats.dropped.len()
        ))
    }

    fn stats(&self) -> Result<FittedStats> {
        self.store.read_json(STATS, "fit-stats")
    }

    fn windows(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let qc = self.qc_output()?;
        self.stats()?;
        let w = &self.cfg.windows;
        let eval = pipeline::span_stage(&corpus, &qc, w.eval_stride, w.min_observed);
        let train: Vec<SiteSpans> = pipeline::span_stage(&corpus, &qc, w.train_stride, w.min_observed)
            .into_iter()
            .filter(|s| s.partition == hydroqc_core::Partition::Train)
            .collect();
        self.store.write_jsonl(EVAL_SPANS, &eval)?;
        self.store.write_jsonl(TRAIN_SPANS, &train)?;
        let n = |v: &[SiteSpans]| v.iter().map(|s| s.spans.len()).sum::<usize>();
        Ok(format!(
            "{} evaluation windows, {} training windows",
            n(&eval),
            n(&train)
        ))
    }

    fn inject_train(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let qc = self.qc_output()?;
        let stats = self.stats()?;
        let spans: Vec<SiteSpans> = self.store.read_jsonl(TRAIN_SPANS, "windows")?;
        let recs = pipeline::inject_train_stage(&corpus, &qc, &stats, &spans, self.cfg, &self.exec)?;
        self.store.write_jsonl(TRAIN_RECORDS, &recs)?;
        let mean = recs.iter().map(|r| r.record.realized_coverage).sum::<f64>() / recs.len().max(1) as f64;
        Ok(format!(
            "{} training windows corrupted, mean coverage {mean:.4}",
            recs.len()
        ))
    }

    fn inject_test(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let qc = self.qc_output()?;
        let stats = self.stats()?;
        let spans: Vec<SiteSpans> = self.store.read_jsonl(EVAL_SPANS, "windows")?;
        let ws = pipeline::inject_test_stage(&corpus, &qc, &stats, &spans, self.cfg, &self.exec)?;
        self.store.write_jsonl(TEST_WINDOWS, &ws)?;
        Ok(format!("{} windows injected", ws.len()))
    }

    fn injected(&self) -> Result<Vec<InjectedWindow>> {
        self.store.read_jsonl(TEST_WINDOWS, "inject-test")
    }

    fn labels(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let (sites, windows) = pipeline::labels_stage(&corpus, self.cfg, &self.exec)?;
        self.store.write_jsonl(LABEL_SITES, &sites)?;
        self.store.write_jsonl(LABEL_WINDOWS, &windows)?;
        let ok = sites.iter().filter(|s| s.accepted).count();
        Ok(format!(
            "{ok} of {} paired archives accepted, {} labeled windows",
            sites.len(),
            windows.len()
        ))
    }

    /// Weak-label windows, if the labels stage has run.
    fn weak(&self) -> Result<Option<Vec<WeakWindow>>> {
        if !self.store.exists(LABEL_WINDOWS) {
            return Ok(None);
        }
        self.store.read_jsonl(LABEL_WINDOWS, "labels").map(Some)
    }

    fn detect(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let stats = self.stats()?;
        let test = pipeline::test_windows(&self.injected()?);
        let baselines = self.cfg.detect.selected()?;
        let dets = pipeline::baseline_stage(&corpus, &stats, &test, &baselines, self.cfg, &self.exec)?;
        self.store.write_jsonl(DETECT_SYNTH, &per_window(&test, &dets))?;
        let mut msg = format!("{} detectors on {} test windows", baselines.len(), test.len());
        if let Some(weak) = self.weak()? {
            let dets = pipeline::baseline_stage(&corpus, &stats, &weak, &baselines, self.cfg, &self.exec)?;
            self.store.write_jsonl(DETECT_WEAK, &per_window(&weak, &dets))?;
            msg.push_str(&format!(", {} weak-label windows", weak.len()));
        }
        Ok(msg)
    }

    fn train_head(&self) -> Result<String> {
        let corpus = self.corpus()?;
        let stats = self.stats()?;
        let all = self.injected()?;
        let (head, history) = pipeline::train_head_stage(&all, self.cfg, &self.exec)?;
        let test = pipeline::test_windows(&all);
        let one = |rs: Vec<DetectionResult>| -> Detections { BTreeMap::from([(HEAD_DETECTOR.to_string(), rs)]) };
        let synth = pipeline::head_stage(&corpus, &stats, &test, &head, self.cfg, &self.exec)?;
        self.store.write_jsonl(HEAD_SYNTH, &per_window(&test, &one(synth)))?;
        if let Some(weak) = self.weak()? {
            let rs = pipeline::head_stage(&corpus, &stats, &weak, &head, self.cfg, &self.exec)?;
            self.store.write_jsonl(HEAD_WEAK, &per_window(&weak, &one(rs)))?;
        }
        let msg = format!(
            "best epoch {}, validation F1 {:.4}, threshold {}",
            history.best_epoch, history.best_val_f1, history.threshold
        );
        let art = HeadArtifact {
            feature_layout: FEATURE_LAYOUT_VERSION,
            training_corpus: corpus.fingerprint(),
            hyper: self.cfg.head.clone(),
            head,
            history,
        };
        self.store.write_json(HEAD, &art)?;
        Ok(msg)
    }

    /// Collects detections for `windows` from the detect and head artifacts.
    fn detections(
        &self,
        windows: &[impl DetectInput],
        base: &str,
        head: &str,
        notices: &mut Vec<String>,
        track: &str,
    ) -> Result<Detections> {
        let mut dets = Detections::new();
        let rows: Vec<WindowDetections> = self.store.read_jsonl(base, "detect")?;
        if !aligned(&rows, windows) {
            return Err(Error::Stale {
                path: self.store.path(base),
                stage: "detect",
            });
        }
        by_detector(rows, &mut dets);
        if self.store.exists(head) {
            let rows: Vec<WindowDetections> = self.store.read_jsonl(head, "train-head")?;
            if !aligned(&rows, windows) {
                return Err(Error::Stale {
                    path: self.store.path(head),
                    stage: "train-head",
                });
            }
            by_detector(rows, &mut dets);
        } else {
            notices.push(format!(
                "{track}: no head detections; run `hydroqc train-head` to include {HEAD_DETECTOR}"
            ));
        }
        Ok(dets)
    }

    /// Recomputes the evaluation purely from persisted artifacts.
    pub fn evaluation(&self) -> Result<Evaluation> {
        let corpus = self.corpus()?;
        let test = pipeline::test_windows(&self.injected()?);
        let mut notices = Vec::new();
        let meta = pipeline::report_meta(&corpus, self.cfg);
        let dets = self.detections(&test, DETECT_SYNTH, HEAD_SYNTH, &mut notices, pipeline::SYNTHETIC_TRACK)?;
        let mut reports = vec![(
            pipeline::SYNTHETIC_TRACK.to_string(),
            pipeline::evaluate_synthetic(&test, &dets, meta.clone()),
        )];
        match self.weak()? {
            None => notices.push("weak: labels stage not run".into()),
            Some(w) if w.is_empty() => notices.push("weak: no paired-archive windows passed the filters".into()),
            Some(_) if !self.store.exists(DETECT_WEAK) => {
                notices.push("weak: no detections; rerun `hydroqc detect` after `hydroqc labels`".into())
            }
            Some(w) => {
                let dets = self.detections(&w, DETECT_WEAK, HEAD_WEAK, &mut notices, pipeline::WEAK_TRACK)?;
                reports.push((
                    pipeline::WEAK_TRACK.to_string(),
                    pipeline::evaluate_weak(&w, &dets, meta),
                ));
            }
        }
        Ok(Evaluation { reports, notices })
    }

    fn evaluate(&self) -> Result<String> {
        let ev = self.evaluation()?;
        self.store.write_json(EVAL_REPORT, &ev)?;
        let mut msg = String::new();
        for (name, r) in &ev.reports {
            let best = r.detectors.iter().max_by(|a, b| a.micro_f1.total_cmp(&b.micro_f1));
            if let Some(b) = best {
                msg.push_str(&format!(
                    "{name}: {} windows, best {} (micro F1 {:.4}); ",
                    r.windows, b.detector, b.micro_f1
                ));
            }
        }
        Ok(msg.trim_end_matches("; ").to_string())
    }

    fn bundle(&self, ev: &Evaluation) -> Result<BTreeMap<String, Vec<u8>>> {
        report::render(&self.cfg.hash(), &ev.reports, &ev.notices)
    }

    fn report(&self) -> Result<String> {
        let ev: Evaluation = self.store.read_json(EVAL_REPORT, "evaluate")?;
        let files = self.bundle(&ev)?;
        for (name, bytes) in &files {
            self.store.write_bytes(&format!("{REPORT_DIR}/{name}"), bytes)?;
        }
        Ok(format!(
            "{} files in {}",
            files.len(),
            self.store.path(REPORT_DIR).display()
        ))
    }

    fn verify(&self) -> Result<String> {
        let stored: Evaluation = self.store.read_json(EVAL_REPORT, "evaluate")?;
        for f in report::BUNDLE_FILES {
            let rel = format!("{REPORT_DIR}/{f}");
            if !self.store.exists(&rel) {
                return Err(Error::Dependency {
                    stage: "report",
                    missing: self.store.path(&rel),
                });
            }
        }
        let fresh = self.evaluation()?;
        let mut problems = Vec::new();
        for (name, _) in &fresh.reports {
            let det = if name == pipeline::SYNTHETIC_TRACK {
                DETECT_SYNTH
            } else {
                DETECT_WEAK
            };
            let rows: Vec<WindowDetections> = self.store.read_jsonl(det, "detect")?;
            let bad = rows
                .iter()
                .flat_map(|r| &r.results)
                .filter(|d| !d.is_consistent())
                .count();
            if bad > 0 {
                problems.push(format!(
                    "{name}: {bad} detection results whose flags do not follow from their scores"
                ));
            }
        }
        if serde_json::to_value(&fresh).ok() != serde_json::to_value(&stored).ok() {
            problems.push(format!("{EVAL_REPORT} differs from the recomputed evaluation"));
        }
        for (name, bytes) in self.bundle(&fresh)? {
            let path = self.store.path(&format!("{REPORT_DIR}/{name}"));
            let on_disk = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if on_disk != bytes {
                problems.push(format!("{} differs from the recomputed report", path.display()));
            }
        }
        if problems.is_empty() {
            Ok(format!(
                "{} report files recomputed and identical",
                report::BUNDLE_FILES.len()
            ))
        } else {
            Err(Error::Verify(problems.join("; ")))
        }
    }
}
