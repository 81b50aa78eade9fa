// SPDX-License-Identifier: MIT OR Apache-2.0

//! Zero-shot baseline detectors, detection features, a reference
//! reconstructor and the trainable MLP detection head.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::MonthlyBands;
use crate::window::Window;

pub mod baselines;
pub mod features;
mod forest;
mod lof;
pub mod mlp;
pub mod recon;
pub mod train;

pub use baselines::BaselineConfig;
pub use features::{extract_detection_features, DetectionFeatures, FEATURE_LAYOUT_VERSION, N_DETECTION_FEATURES};
pub use forest::isolation_forest_scores;
pub use lof::lof_scores;
pub use mlp::{mlp_forward, mlp_mc, MlpHead, Mode};
pub use recon::{Reconstruction, Reconstructor, ReferenceReconstructor};
pub use train::{train_head, Executor, HeadTrainConfig, Sequential, TrainHistory, TrainSample};

/// How a detector's flags follow from its scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum FlagRule {
    /// `score > value`
    Above(f64),
    /// `score >= value`
    AtLeast(f64),
    /// The `k` highest scores, ties broken by earlier index.
    TopK(usize),
}

impl FlagRule {
    pub fn apply(&self, scores: &[f64]) -> Vec<bool> {
        match *self {
            FlagRule::Above(t) => scores.iter().map(|&s| s > t).collect(),
            FlagRule::AtLeast(t) => scores.iter().map(|&s| s >= t).collect(),
            FlagRule::TopK(k) => {
                let mut idx: Vec<usize> = (0..scores.len()).collect();
                idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut flags = vec![false; scores.len()];
                for &i in idx.iter().take(k) {
                    flags[i] = true;
                }
                flags
            }
        }
    }
}

/// Per-timestep output of one detector on one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub detector: String,
    #[serde(with = "crate::series::missing_vec")]
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub rule: FlagRule,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::series::missing_opt_vec"
    )]
    pub uncertainty: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DetectionResult {
    pub fn from_scores(detector: &str, scores: Vec<f64>, rule: FlagRule) -> Self {
        let flags = rule.apply(&scores);
        DetectionResult {
            detector: String::from(detector),
            scores,
            flags,
            rule,
            uncertainty: None,
            warnings: Vec::new(),
        }
    }

    /// Whether the stored flags are exactly what the rule gives on the scores.
    pub fn is_consistent(&self) -> bool {
        self.scores.len() == self.flags.len() && self.rule.apply(&self.scores) == self.flags
    }

    pub fn warn(mut self, msg: &str) -> Self {
        self.warnings.push(String::from(msg));
        self
    }
}

/// Flags `p >= threshold`.
pub fn threshold_flags(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    FlagRule::AtLeast(threshold).apply(probabilities)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Zscore,
    Iqr,
    MovingAvg,
    IsolationForest,
    Lof,
    Stl,
    RatingResidual,
    RateOfChange,
    Persistence,
    QhConsistency,
    SeasonalEnvelope,
}

impl Baseline {
    pub const ALL: [Baseline; 11] = [
        Baseline::Zscore,
        Baseline::Iqr,
        Baseline::MovingAvg,
        Baseline::IsolationForest,
        Baseline::Lof,
        Baseline::Stl,
        Baseline::RatingResidual,
        Baseline::RateOfChange,
        Baseline::Persistence,
        Baseline::QhConsistency,
        Baseline::SeasonalEnvelope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Zscore => "zscore",
            Baseline::Iqr => "iqr",
            Baseline::MovingAvg => "moving_avg",
            Baseline::IsolationForest => "isolation_forest",
            Baseline::Lof => "lof",
            Baseline::Stl => "stl",
            Baseline::RatingResidual => "rating_residual",
            Baseline::RateOfChange => "rate_of_change",
            Baseline::Persistence => "persistence",
            Baseline::QhConsistency => "qh_consistency",
            Baseline::SeasonalEnvelope => "seasonal_envelope",
        }
    }

    pub fn parse(s: &str) -> Option<Baseline> {
        Baseline::ALL.into_iter().find(|b| b.name() == s)
    }
}

/// Runs one baseline on a window's physical traces. `bands` is required by
/// the seasonal envelope only; `seed` is used by the isolation forest only.
pub fn run_baseline(
    b: Baseline,
    w: &Window,
    bands: Option<&MonthlyBands>,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<DetectionResult> {
    let (q, h) = (&w.discharge[..], &w.stage[..]);
    Ok(match b {
        Baseline::Zscore => baselines::zscore_detect(q, h, cfg),
        Baseline::Iqr => baselines::iqr_detect(q, h, cfg),
        Baseline::MovingAvg => baselines::moving_avg_detect(q, h, cfg),
        Baseline::IsolationForest => {
            let mut rng = crate::rng::rng_from_seed(seed);
            let scores = isolation_forest_scores(q, h, cfg.iforest_trees, cfg.iforest_subsample, &mut rng)?;
            let valid = q.iter().zip(h).filter(|(a, b)| a.is_finite() && b.is_finite()).count();
            let k = libm::ceil(cfg.iforest_contamination * valid as f64) as usize;
            DetectionResult::from_scores(b.name(), scores, FlagRule::TopK(k))
        }
        Baseline::Lof => DetectionResult::from_scores(
            b.name(),
            lof_scores(q, h, cfg.lof_k)?,
            FlagRule::Above(cfg.lof_threshold),
        ),
        Baseline::Stl => baselines::stl_detect(q, h, cfg),
        Baseline::RatingResidual => baselines::rating_residual_detect(q, h, cfg),
        Baseline::RateOfChange => baselines::rate_of_change_detect(q, h, cfg),
        Baseline::Persistence => baselines::persistence_detect(q, h, cfg),
        Baseline::QhConsistency => baselines::qh_consistency_detect(q, h, cfg),
        Baseline::SeasonalEnvelope => {
            let bands = bands.ok_or_else(|| Error::invalid("seasonal envelope needs monthly bands"))?;
            let months: Vec<usize> = w.timestamps().map(|t| t.month_index()).collect();
            baselines::seasonal_envelope_detect(q, h, &months, bands)
        }
    })
}

pub const HEAD_DETECTOR: &str = "mlp_head";

/// Head detection on one window: eval-mode probabilities as scores, flags at
/// the head's tuned threshold, MC-dropout spread as uncertainty.
pub fn head_detect<R: Reconstructor + ?Sized>(
    w: &Window,
    head: &MlpHead,
    recon: &R,
    mc_passes: usize,
    seed: u64,
) -> Result<DetectionResult> {
    head.validate()?;
    let r = recon.reconstruct(w)?;
    let f = extract_detection_features(&w.discharge, &w.stage, &r);
    let mut rng = crate::rng::rng_from_seed(seed);
    let p = mlp_forward(&f, head, Mode::Eval, &mut rng);
    let mut out = DetectionResult::from_scores(HEAD_DETECTOR, p, FlagRule::AtLeast(head.threshold));
    let (_, std) = mlp_mc(&f, head, mc_passes, &mut rng);
    out.uncertainty = Some(std);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_convention() {
        assert_eq!(threshold_flags(&[0.5, 0.49], 0.5), [true, false]);
        assert!(threshold_flags(&[0.2, 1.0], 1.1).iter().all(|f| !f));
        assert!(threshold_flags(&[0.0, 0.3], 0.0).iter().all(|f| *f));
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(FlagRule::TopK(2).apply(&[0.5, 0.5, 0.5]), [true, true, false]);
        assert_eq!(FlagRule::TopK(1).apply(&[0.1, 0.9, 0.9]), [false, true, false]);
    }

    #[test]
    fn names_round_trip() {
        for b in Baseline::ALL {
            assert_eq!(Baseline::parse(b.name()), Some(b));
        }
    }
}
