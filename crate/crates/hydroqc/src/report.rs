// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report bundle: one JSON summary plus long-format CSV tables. Every table
//! starts with a `benchmark` column naming the evaluation track.

use std::collections::BTreeMap;

use hydroqc_core::eval::BenchmarkReport;
use serde::Serialize;

use crate::error::{Error, Result};

pub const BUNDLE_FILES: [&str; 7] = [
    "summary.json",
    "per_detector.csv",
    "per_type_f1.csv",
    "magnitude_recall.csv",
    "seasonal_rates.csv",
    "durations.csv",
    "significance.csv",
];

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::data(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::data(format!("csv: {e}")))
}

#[derive(Serialize)]
struct Headline<'a> {
    detector: &'a str,
    micro_f1: f64,
    macro_f1: f64,
    auroc: Option<f64>,
}

#[derive(Serialize)]
struct TrackSummary<'a> {
    corpus_fingerprint: &'a str,
    injector_config_hash: &'a str,
    seeds: &'a BTreeMap<String, u64>,
    windows: usize,
    labeled_timesteps: u64,
    positive_timesteps: u64,
    best_detector: Option<&'a str>,
    headline: Vec<Headline<'a>>,
    notices: &'a [String],
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    headline_metric: &'static str,
    benchmarks: BTreeMap<&'a str, TrackSummary<'a>>,
    notices: &'a [String],
}

/// Renders the bundle for `reports` (benchmark name, report) to
/// file name → bytes. Same input, same bytes.
pub fn render(
    config_hash: &str,
    reports: &[(String, BenchmarkReport)],
    notices: &[String],
) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut benchmarks = BTreeMap::new();
    for (name, r) in reports {
        let best = r
            .detectors
            .iter()
            .max_by(|a, b| a.micro_f1.total_cmp(&b.micro_f1).then(b.detector.cmp(&a.detector)))
            .map(|d| d.detector.as_str());
        benchmarks.insert(
            name.as_str(),
            TrackSummary {
                corpus_fingerprint: &r.meta.corpus_fingerprint,
                injector_config_hash: &r.meta.injector_config_hash,
                seeds: &r.meta.seeds,
                windows: r.windows,
                labeled_timesteps: r.labeled_timesteps,
                positive_timesteps: r.positive_timesteps,
                best_detector: best,
                headline: r
                    .detectors
                    .iter()
                    .map(|d| Headline {
                        detector: &d.detector,
                        micro_f1: d.micro_f1,
                        macro_f1: d.macro_f1,
                        auroc: d.auroc,
                    })
                    .collect(),
                notices: &r.notices,
            },
        );
    }
    let summary = Summary {
        config_hash,
        headline_metric: "micro_f1",
        benchmarks,
        notices,
    };
    let mut json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::data(e.to_string()))?;
    json.push(b'\n');
    out.insert("summary.json".to_string(), json);

    let each = |f: &dyn Fn(&str, &BenchmarkReport) -> Vec<Vec<String>>| -> Vec<Vec<String>> {
        reports.iter().flat_map(|(n, r)| f(n, r)).collect()
    };

    let rows = each(&|n, r| {
        r.detectors
            .iter()
            .map(|d| {
                let c = &d.confusion;
                vec![
                    n.to_string(),
                    d.detector.clone(),
                    d.windows.to_string(),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.fn_.to_string(),
                    c.tn.to_string(),
                    num(d.precision),
                    num(d.recall),
                    num(d.micro_f1),
                    num(d.macro_f1),
                    opt(d.auroc),
                    d.degenerate.to_string(),
                ]
            })
            .collect()
    });
    let h = [
        "benchmark",
        "detector",
        "windows",
        "tp",
        "fp",
        "fn",
        "tn",
        "precision",
        "recall",
        "micro_f1",
        "macro_f1",
        "auroc",
        "degenerate",
    ];
    out.insert("per_detector.csv".to_string(), table(&h, rows)?);

    let rows = each(&|n, r| {
        r.per_type
            .iter()
            .map(|t| {
                let c = &t.confusion;
                vec![
                    n.to_string(),
                    t.detector.clone(),
                    t.type_id.to_string(),
                    t.type_name.clone(),
                    t.windows.to_string(),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.fn_.to_string(),
                    c.tn.to_string(),
                    num(t.precision),
                    num(t.recall),
                    num(t.f1),
                ]
            })
            .collect()
    });
    let h = [
        "benchmark",
        "detector",
        "type_id",
        "type",
        "windows",
        "tp",
        "fp",
        "fn",
        "tn",
        "precision",
        "recall",
        "f1",
    ];
    out.insert("per_type_f1.csv".to_string(), table(&h, rows)?);

    let rows = each(&|n, r| {
        r.magnitude
            .iter()
            .map(|m| {
                vec![
                    n.to_string(),
                    m.detector.clone(),
                    num(m.lo),
                    num(m.hi),
                    m.positives.to_string(),
                    m.detected.to_string(),
                    num(m.recall),
                ]
            })
            .collect()
    });
    out.insert(
        "magnitude_recall.csv".to_string(),
        table(
            &["benchmark", "detector", "lo", "hi", "positives", "detected", "recall"],
            rows,
        )?,
    );

    let rows = each(&|n, r| {
        r.seasonal
            .iter()
            .map(|s| {
                vec![
                    n.to_string(),
                    s.track.clone(),
                    s.season.clone(),
                    s.flagged.to_string(),
                    s.total.to_string(),
                    num(s.rate),
                ]
            })
            .collect()
    });
    out.insert(
        "seasonal_rates.csv".to_string(),
        table(&["benchmark", "track", "season", "flagged", "total", "rate"], rows)?,
    );

    let rows = each(&|n, r| {
        r.durations
            .iter()
            .map(|d| {
                vec![
                    n.to_string(),
                    d.track.clone(),
                    d.under_6h.to_string(),
                    d.from_6_to_48h.to_string(),
                    d.over_48h.to_string(),
                ]
            })
            .collect()
    });
    out.insert(
        "durations.csv".to_string(),
        table(&["benchmark", "track", "under_6h", "6_to_48h", "over_48h"], rows)?,
    );

    let rows = each(&|n, r| {
        r.significance
            .iter()
            .map(|s| {
                vec![
                    n.to_string(),
                    s.a.clone(),
                    s.b.clone(),
                    s.windows.to_string(),
                    s.nonzero.to_string(),
                    num(s.w_plus),
                    num(s.p_value),
                    s.exact.to_string(),
                    num(s.mean_f1_a),
                    num(s.mean_f1_b),
                ]
            })
            .collect()
    });
    let h = [
        "benchmark",
        "a",
        "b",
        "windows",
        "nonzero",
        "w_plus",
        "p_value",
        "exact",
        "mean_f1_a",
        "mean_f1_b",
    ];
    out.insert("significance.csv".to_string(), table(&h, rows)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hydroqc_core::detect::{DetectionResult, FlagRule};
    use hydroqc_core::eval::{build_report, ReportMeta, WindowEval};
    use hydroqc_core::Timestamp;

    fn report() -> BenchmarkReport {
        let w = WindowEval {
            site_id: "a".into(),
            start: Timestamp(0),
            labels: vec![true, false, true, false],
            labeled: vec![true; 4],
            single_type: Some(1),
            magnitude: None,
        };
        let mut res = BTreeMap::new();
        res.insert(
            "d".to_string(),
            vec![DetectionResult::from_scores(
                "d",
                vec![0.9, 0.1, 0.2, 0.8],
                FlagRule::Above(0.5),
            )],
        );
        build_report(&[w], &res, ReportMeta::default())
    }

    #[test]
    fn all_files_and_stable_bytes() {
        let r = vec![("synthetic".to_string(), report())];
        let a = render("h", &r, &[]).unwrap();
        assert_eq!(a.keys().count(), BUNDLE_FILES.len());
        for f in BUNDLE_FILES {
            assert!(a.contains_key(f), "{f}");
        }
        assert_eq!(a, render("h", &r, &[]).unwrap());
        let per = String::from_utf8(a["per_detector.csv"].clone()).unwrap();
        assert!(per.starts_with("benchmark,detector,windows,tp,fp,fn,tn"));
        assert!(per.contains("synthetic,d,1,1,1,1,1,0.5,0.5,0.5"), "{per}");
    }
}
