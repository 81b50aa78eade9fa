// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch training of the detection head on focal loss with Adam.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::DetectionFeatures;
use super::mlp::{MlpHead, N_PARAMS};
use crate::error::{Error, Result};
use crate::losses::focal_point;
use crate::math::{cos, sigmoid, sqrt};
use crate::rng::{derive_rng, uniform_int};

/// Runs independent jobs and returns their results in index order.
pub trait Executor: Sync {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T>;
}

pub struct Sequential;

impl Executor for Sequential {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

/// One window of features with its labels. Timesteps with `labeled` false
/// are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub features: DetectionFeatures,
    pub labels: Vec<bool>,
    pub labeled: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_windows: usize,
    pub samples_per_window: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub dropout_p: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Candidate decision thresholds are `k / (steps + 1)`, `k = 1..=steps`.
    pub threshold_steps: usize,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 50,
            batch_windows: 256,
            samples_per_window: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            dropout_p: 0.2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            threshold_steps: 19,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub threshold: f64,
    pub threshold_f1: f64,
    pub warnings: Vec<String>,
}

/// Mean focal loss of the sampled timesteps and its gradient.
pub fn sample_gradient(
    head: &MlpHead,
    xs: &[[f64; super::mlp::IN]],
    ys: &[bool],
    dropout: bool,
    alpha: f64,
    gamma: f64,
    rng: &mut crate::rng::StageRng,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; N_PARAMS];
    let mut loss = 0.0;
    let n = xs.len().max(1) as f64;
    for (x, &y) in xs.iter().zip(ys) {
        let tr = head.forward_one(x, dropout, rng);
        let p = sigmoid(tr.logit);
        let (l, dp) = focal_point(p, y, alpha, gamma);
        loss += l;
        head.backward_one(x, &tr, dp * p * (1.0 - p) / n, &mut grad);
    }
    (loss / n, grad)
}

fn predict(head: &MlpHead, f: &DetectionFeatures) -> Vec<f64> {
    let mut unused = crate::rng::rng_from_seed(0);
    f.values
        .iter()
        .map(|x| sigmoid(head.forward_one(x, false, &mut unused).logit))
        .collect()
}

fn focal_mean(probs: &[Vec<f64>], set: &[TrainSample], alpha: f64, gamma: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, s) in probs.iter().zip(set) {
        for t in 0..p.len() {
            if s.labeled[t] {
                sum += focal_point(p[t], s.labels[t], alpha, gamma).0;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn micro_f1(probs: &[Vec<f64>], set: &[TrainSample], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, s) in probs.iter().zip(set) {
        for t in 0..p.len() {
            if !s.labeled[t] {
                continue;
            }
            match (p[t] >= threshold, s.labels[t]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let d = 2 * tp + fp + fneg;
    if d == 0 {
        0.0
    } else {
        2.0 * tp as f64 / d as f64
    }
}

/// Trains a freshly initialized head. Early stopping and the decision
/// threshold use `val` (or `train` when `val` is empty).
pub fn train_head<E: Executor>(
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &HeadTrainConfig,
    seed: u64,
    exec: &E,
) -> Result<(MlpHead, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::insufficient("head training needs at least one window"));
    }
    if cfg.epochs == 0 || cfg.batch_windows == 0 || cfg.samples_per_window == 0 {
        return Err(Error::invalid(
            "epochs, batch size and samples per window must be positive",
        ));
    }
    for s in train.iter().chain(val) {
        if s.labels.len() != s.features.len() || s.labeled.len() != s.features.len() {
            return Err(Error::invalid("labels and features differ in length"));
        }
    }
    let mut history = TrainHistory::default();
    let (mut pos, mut neg) = (0usize, 0usize);
    for s in train {
        for (l, ok) in s.labels.iter().zip(&s.labeled) {
            if *ok {
                if *l {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
    }
    if pos == 0 || neg == 0 {
        let msg = format!("training labels are all one class ({pos} positive, {neg} negative)");
        log::warn!("{msg}");
        history.warnings.push(msg);
    }
    let val = if val.is_empty() { train } else { val };

    let mut head = MlpHead::init(cfg.dropout_p, &mut derive_rng(seed, &["head", "init"]));
    let (mut m, mut v) = (vec![0.0; N_PARAMS], vec![0.0; N_PARAMS]);
    let batches = train.len().div_ceil(cfg.batch_windows);
    let total_steps = (cfg.epochs * batches) as f64;
    let mut step = 0usize;
    let mut best = (f64::NEG_INFINITY, head.params.clone(), 0usize, f64::INFINITY);
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(seed, &["head", "order", &format!("{epoch}")]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_windows) {
            let head_ref = &head;
            let parts = exec.map(batch.len(), |i| {
                let w = batch[i];
                let s = &train[w];
                let mut rng = derive_rng(seed, &["head", "sample", &format!("{epoch}"), &format!("{w}")]);
                let idx: Vec<usize> = (0..s.labels.len()).filter(|&t| s.labeled[t]).collect();
                if idx.is_empty() {
                    return (0.0, vec![0.0; N_PARAMS]);
                }
                let picks: Vec<usize> = (0..cfg.samples_per_window)
                    .map(|_| idx[uniform_int(&mut rng, 0, idx.len() - 1)])
                    .collect();
                let xs: Vec<_> = picks.iter().map(|&t| s.features.values[t]).collect();
                let ys: Vec<bool> = picks.iter().map(|&t| s.labels[t]).collect();
                sample_gradient(head_ref, &xs, &ys, true, cfg.focal_alpha, cfg.focal_gamma, &mut rng)
            });
            let k = batch.len() as f64;
            let mut g = vec![0.0; N_PARAMS];
            for (l, pg) in &parts {
                epoch_loss += l;
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += b / k;
                }
            }
            step += 1;
            let lr = cfg.learning_rate * 0.5 * (1.0 + cos(core::f64::consts::PI * (step - 1) as f64 / total_steps));
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let c1 = 1.0 - crate::math::powf(b1, step as f64);
            let c2 = 1.0 - crate::math::powf(b2, step as f64);
            for i in 0..N_PARAMS {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                head.params[i] -= lr * (m[i] / c1) / (sqrt(v[i] / c2) + cfg.adam_eps);
            }
        }
        head.validate()?;
        let probs = exec.map(val.len(), |i| predict(&head, &val[i].features));
        let f1 = micro_f1(&probs, val, 0.5);
        let val_loss = focal_mean(&probs, val, cfg.focal_alpha, cfg.focal_gamma);
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_f1: f1,
            val_loss,
        });
        // Ties in F1 (common when validation has no positives) go to the lower loss.
        if f1 > best.0 || (f1 == best.0 && val_loss < best.3) {
            best = (f1, head.params.clone(), epoch, val_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    head.params = best.1;
    history.best_epoch = best.2;
    history.best_val_f1 = best.0;
    let probs = exec.map(val.len(), |i| predict(&head, &val[i].features));
    let mut pick = (0.5, micro_f1(&probs, val, 0.5));
    for k in 1..=cfg.threshold_steps {
        let t = k as f64 / (cfg.threshold_steps + 1) as f64;
        let f1 = micro_f1(&probs, val, t);
        if f1 > pick.1 {
            pick = (t, f1);
        }
    }
    head.threshold = pick.0;
    history.threshold = pick.0;
    history.threshold_f1 = pick.1;
    Ok((head, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::features::FEATURE_LAYOUT_VERSION;
    use crate::detect::mlp::{B1, B3, IN, W2, W3};
    use crate::rng::{coin, normal, rng_from_seed};

    fn point(rng: &mut crate::rng::StageRng) -> [f64; IN] {
        let mut x = [0.0; IN];
        for v in &mut x {
            *v = normal(rng);
        }
        x
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(3);
        let head = MlpHead::init(0.2, &mut rng);
        let xs: Vec<[f64; IN]> = (0..6).map(|_| point(&mut rng)).collect();
        let ys = [true, false, false, true, false, true];
        let loss_at = |h: &MlpHead| sample_gradient(h, &xs, &ys, false, 0.25, 2.0, &mut rng_from_seed(0)).0;
        let (_, g) = sample_gradient(&head, &xs, &ys, false, 0.25, 2.0, &mut rng_from_seed(0));
        for i in [0, 5, 700, B1 + 3, W2 + 11, W2 + 4000, W3 + 7, B3] {
            let eps = 1e-6;
            let (mut up, mut dn) = (head.clone(), head.clone());
            up.params[i] += eps;
            dn.params[i] -= eps;
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "param {i}: analytic {} numeric {fd}", g[i]);
        }
    }

    fn toy(n_windows: usize, len: usize, seed: u64, all_clean: bool) -> Vec<TrainSample> {
        let mut rng = rng_from_seed(seed);
        (0..n_windows)
            .map(|_| {
                let mut values = Vec::with_capacity(len);
                let mut labels = Vec::with_capacity(len);
                for _ in 0..len {
                    let mut x = point(&mut rng);
                    let y = !all_clean && coin(&mut rng, 0.2);
                    x[0] = if y { 3.0 } else { -1.0 } + 0.3 * x[0];
                    values.push(x);
                    labels.push(y);
                }
                TrainSample {
                    features: DetectionFeatures {
                        layout: FEATURE_LAYOUT_VERSION,
                        values,
                    },
                    labels,
                    labeled: vec![true; len],
                }
            })
            .collect()
    }

    #[test]
    fn separable_toy_is_learned() {
        let cfg = HeadTrainConfig {
            epochs: 30,
            batch_windows: 4,
            ..HeadTrainConfig::default()
        };
        let (head, hist) = train_head(&toy(16, 64, 1, false), &toy(4, 64, 2, false), &cfg, 7, &Sequential).unwrap();
        assert!(hist.best_val_f1 > 0.97, "{hist:?}");
        let test = toy(2, 64, 9, false);
        let probs: Vec<Vec<f64>> = test.iter().map(|s| predict(&head, &s.features)).collect();
        assert!(micro_f1(&probs, &test, head.threshold) > 0.97);
    }

    #[test]
    fn all_negative_labels_push_probabilities_down() {
        let cfg = HeadTrainConfig {
            epochs: 50,
            batch_windows: 1,
            learning_rate: 1e-2,
            ..HeadTrainConfig::default()
        };
        let (head, hist) = train_head(&toy(8, 64, 4, true), &[], &cfg, 7, &Sequential).unwrap();
        assert_eq!(hist.warnings.len(), 1);
        let probs = predict(&head, &toy(1, 64, 5, true)[0].features);
        assert!(probs.iter().all(|&p| p < 0.1), "{probs:?}");
    }

    #[test]
    fn same_seed_same_head() {
        let cfg = HeadTrainConfig {
            epochs: 3,
            batch_windows: 4,
            ..HeadTrainConfig::default()
        };
        let data = toy(8, 32, 1, false);
        let a = train_head(&data, &[], &cfg, 11, &Sequential).unwrap();
        let b = train_head(&data, &[], &cfg, 11, &Sequential).unwrap();
        assert_eq!(a.0.params, b.0.params);
        assert_eq!(a.1, b.1);
    }
}
