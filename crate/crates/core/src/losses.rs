// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pretraining and fine-tuning objectives as pure functions of explicit
//! inputs. Sequences are `T` rows of `F` channels; differentiable losses
//! return the gradient with respect to the prediction in the same shape.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ln, powf};
use crate::window::{channel, N_FEATURES};

pub type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_discharge: f64,
    pub w_stage: f64,
    pub w_seasonal: f64,
    pub w_static: f64,
    /// recon, temporal, variance, scale, diversity
    pub pretrain: [f64; 5],
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub finetune_focal: f64,
    pub finetune_physics: f64,
    pub lambda_c_max: f64,
    pub lambda_p_max: f64,
    pub warmup_epochs: f64,
    pub rank_target: f64,
    pub lambda_rank: f64,
    pub lambda_rc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_discharge: 3.0,
            w_stage: 2.5,
            w_seasonal: 1.5,
            w_static: 1.0,
            pretrain: [1.0, 0.6, 0.4, 0.3, 0.05],
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            finetune_focal: 1.5,
            finetune_physics: 0.1,
            lambda_c_max: 0.25,
            lambda_p_max: 0.05,
            warmup_epochs: 3.0,
            rank_target: 10.0,
            lambda_rank: 1.0,
            lambda_rc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_discharge,
            self.w_stage,
            self.w_seasonal,
            self.w_static,
            self.focal_alpha,
            self.focal_gamma,
            self.finetune_focal,
            self.finetune_physics,
            self.lambda_c_max,
            self.lambda_p_max,
            self.rank_target,
            self.lambda_rank,
            self.lambda_rc,
        ];
        if all.iter().chain(&self.pretrain).any(|v| !(v.is_finite() && *v >= 0.0)) || self.warmup_epochs <= 0.0 {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Per-channel weights in window feature order.
    pub fn channel_weights(&self) -> [f64; N_FEATURES] {
        let mut w = [self.w_static; N_FEATURES];
        w[channel::DISCHARGE] = self.w_discharge;
        w[channel::STAGE] = self.w_stage;
        w[channel::SEASONAL_Q] = self.w_seasonal;
        w[channel::SEASONAL_H] = self.w_seasonal;
        w
    }
}

/// Fine-tuning epoch, counted from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpochIndex(u32);

impl EpochIndex {
    pub fn new(epoch: u32) -> Result<Self> {
        if epoch == 0 {
            return Err(Error::invalid("epochs are counted from 1"));
        }
        Ok(EpochIndex(epoch))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

fn zeros_like(x: &[Vec<f64>]) -> Rows {
    x.iter().map(|r| vec![0.0; r.len()]).collect()
}

fn check_shape(a: &[Vec<f64>], b: &[Vec<f64>]) {
    assert_eq!(a.len(), b.len(), "sequence lengths differ");
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len(), "channel counts differ");
    }
}

/// `(1/T) sum_t sum_f w_f (pred - target)^2`.
pub fn weighted_recon_loss(pred: &[Vec<f64>], target: &[Vec<f64>], w: &[f64]) -> (f64, Rows) {
    check_shape(pred, target);
    let t = pred.len().max(1) as f64;
    let mut g = zeros_like(pred);
    let mut loss = 0.0;
    for (k, (p, y)) in pred.iter().zip(target).enumerate() {
        for f in 0..p.len() {
            let e = p[f] - y[f];
            loss += w[f] * e * e;
            g[k][f] = 2.0 * w[f] * e / t;
        }
    }
    (loss / t, g)
}

/// Weighted squared error between predicted and target first differences on
/// `channels`, averaged over the `T - 1` differences.
pub fn temporal_consistency_loss(pred: &[Vec<f64>], target: &[Vec<f64>], w: &[f64], channels: &[usize]) -> (f64, Rows) {
    check_shape(pred, target);
    let mut g = zeros_like(pred);
    if pred.len() < 2 {
        return (0.0, g);
    }
    let m = (pred.len() - 1) as f64;
    let mut loss = 0.0;
    for t in 1..pred.len() {
        for &f in channels {
            let e = (pred[t][f] - pred[t - 1][f]) - (target[t][f] - target[t - 1][f]);
            loss += w[f] * e * e;
            let d = 2.0 * w[f] * e / m;
            g[t][f] += d;
            g[t - 1][f] -= d;
        }
    }
    (loss / m, g)
}

fn column_var(x: &[Vec<f64>], f: usize) -> (f64, f64) {
    let t = x.len() as f64;
    let mean = x.iter().map(|r| r[f]).sum::<f64>() / t;
    let var = x.iter().map(|r| (r[f] - mean) * (r[f] - mean)).sum::<f64>() / t;
    (mean, var)
}

/// `sum_f (Var(pred_f) - Var(target_f))^2` with population variances.
pub fn variance_preservation_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> (f64, Rows) {
    check_shape(pred, target);
    let mut g = zeros_like(pred);
    if pred.is_empty() {
        return (0.0, g);
    }
    let t = pred.len() as f64;
    let mut loss = 0.0;
    for f in 0..pred[0].len() {
        let (mp, vp) = column_var(pred, f);
        let (_, vt) = column_var(target, f);
        let d = vp - vt;
        loss += d * d;
        for (k, row) in pred.iter().enumerate() {
            g[k][f] = 2.0 * d * 2.0 * (row[f] - mp) / t;
        }
    }
    (loss, g)
}

/// Squared error on the scale-embedding channels, summed over channels and
/// averaged over time.
pub fn scale_consistency_loss(pred: &[Vec<f64>], target: &[Vec<f64>], channels: &[usize]) -> (f64, Rows) {
    check_shape(pred, target);
    let t = pred.len().max(1) as f64;
    let mut g = zeros_like(pred);
    let mut loss = 0.0;
    for (k, (p, y)) in pred.iter().zip(target).enumerate() {
        for &f in channels {
            let e = p[f] - y[f];
            loss += e * e;
            g[k][f] = 2.0 * e / t;
        }
    }
    (loss / t, g)
}

/// Singular values above `rel_tol * sigma_max`.
pub fn effective_rank(h: &[Vec<f64>], rel_tol: f64) -> usize {
    if h.is_empty() || h[0].is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(h.len(), h[0].len(), |i, j| h[i][j]);
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Mean row entropy of a row-stochastic matrix (natural log, `0 ln 0 = 0`).
pub fn mean_row_entropy(a: &[Vec<f64>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let total: f64 = a
        .iter()
        .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * ln(p)).sum::<f64>())
        .sum();
    total / a.len() as f64
}

/// `-entropy(A) + lambda_rank * max(0, target - effective_rank(H))`.
pub fn diversity_loss(attention: &[Vec<f64>], hidden: &[Vec<f64>], weights: &LossWeights) -> f64 {
    let rank = effective_rank(hidden, 1e-3) as f64;
    -mean_row_entropy(attention) + weights.lambda_rank * (weights.rank_target - rank).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainTerms {
    pub recon: f64,
    pub temporal: f64,
    pub variance: f64,
    pub scale: f64,
    pub diversity: f64,
}

pub fn pretrain_combined(t: &PretrainTerms, weights: &LossWeights) -> f64 {
    let w = weights.pretrain;
    w[0] * t.recon + w[1] * t.temporal + w[2] * t.variance + w[3] * t.scale + w[4] * t.diversity
}

pub const FOCAL_CLAMP: f64 = 1e-6;

/// Focal loss with `alpha` on positives and `1 - alpha` on negatives;
/// returns the mean loss and its gradient with respect to each probability.
/// Probabilities are clamped to `[1e-6, 1 - 1e-6]`; the gradient is zero
/// where the clamp is active.
pub fn focal_loss(p: &[f64], y: &[bool], alpha: f64, gamma: f64) -> (f64, Vec<f64>) {
    assert_eq!(p.len(), y.len());
    let n = p.len().max(1) as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; p.len()];
    for (k, (&pi, &yi)) in p.iter().zip(y).enumerate() {
        let (l, d) = focal_point(pi, yi, alpha, gamma);
        loss += l;
        g[k] = d / n;
    }
    (loss / n, g)
}

/// Loss and derivative with respect to `p` for one prediction.
pub fn focal_point(p: f64, y: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let c = p.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let active = c == p;
    if y {
        let m = 1.0 - c;
        let l = -alpha * powf(m, gamma) * ln(c);
        let d = alpha * (gamma * powf(m, gamma - 1.0) * ln(c) - powf(m, gamma) / c);
        (l, if active { d } else { 0.0 })
    } else {
        let l = -(1.0 - alpha) * powf(c, gamma) * ln(1.0 - c);
        let d = -(1.0 - alpha) * (gamma * powf(c, gamma - 1.0) * ln(1.0 - c) - powf(c, gamma) / (1.0 - c));
        (l, if active { d } else { 0.0 })
    }
}

fn masked_mse(pred: &[Vec<f64>], target: &[Vec<f64>], mask: &[bool], want: bool) -> (f64, Rows) {
    check_shape(pred, target);
    assert_eq!(pred.len(), mask.len());
    let mut g = zeros_like(pred);
    let count: usize = pred
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == want)
        .map(|(r, _)| r.len())
        .sum();
    if count == 0 {
        return (0.0, g);
    }
    let c = count as f64;
    let mut loss = 0.0;
    for (k, (p, y)) in pred.iter().zip(target).enumerate() {
        if mask[k] != want {
            continue;
        }
        for f in 0..p.len() {
            let e = p[f] - y[f];
            loss += e * e;
            g[k][f] = 2.0 * e / c;
        }
    }
    (loss / c, g)
}

/// Mean squared error to the clean target over masked timesteps; 0 when the
/// mask is empty.
pub fn corruption_recon_loss(pred: &[Vec<f64>], clean: &[Vec<f64>], mask: &[bool]) -> (f64, Rows) {
    masked_mse(pred, clean, mask, true)
}

/// Mean squared error to the observed values over unmasked timesteps; 0
/// when every timestep is masked.
pub fn clean_preservation_loss(pred: &[Vec<f64>], observed: &[Vec<f64>], mask: &[bool]) -> (f64, Rows) {
    masked_mse(pred, observed, mask, false)
}

/// Gradients of [`physics_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsGrad {
    pub q: Vec<f64>,
    pub h: Vec<f64>,
    pub d_rc: Vec<f64>,
}

/// `(1/(T-1)) sum ReLU(-dQ_t dH_t) + lambda_rc * mean(d_rc)`.
pub fn physics_loss(q: &[f64], h: &[f64], d_rc: &[f64], lambda_rc: f64) -> (f64, PhysicsGrad) {
    assert_eq!(q.len(), h.len());
    let mut g = PhysicsGrad {
        q: vec![0.0; q.len()],
        h: vec![0.0; h.len()],
        d_rc: vec![0.0; d_rc.len()],
    };
    let mut loss = 0.0;
    if q.len() >= 2 {
        let m = (q.len() - 1) as f64;
        for t in 1..q.len() {
            let (dq, dh) = (q[t] - q[t - 1], h[t] - h[t - 1]);
            let v = -dq * dh;
            if v > 0.0 {
                loss += v / m;
                g.q[t] -= dh / m;
                g.q[t - 1] += dh / m;
                g.h[t] -= dq / m;
                g.h[t - 1] += dq / m;
            }
        }
    }
    if !d_rc.is_empty() {
        let k = d_rc.len() as f64;
        loss += lambda_rc * d_rc.iter().sum::<f64>() / k;
        for v in &mut g.d_rc {
            *v = lambda_rc / k;
        }
    }
    (loss, g)
}

/// `(lambda_c, lambda_p)` ramped linearly over the warm-up epochs.
pub fn lambda_schedules(epoch: EpochIndex, weights: &LossWeights) -> (f64, f64) {
    let r = (f64::from(epoch.get()) / weights.warmup_epochs).min(1.0);
    (weights.lambda_c_max * r, weights.lambda_p_max * r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTerms {
    pub focal: f64,
    pub corrupt: f64,
    pub preserve: f64,
    pub physics: f64,
}

pub fn finetune_combined(t: &FinetuneTerms, epoch: EpochIndex, weights: &LossWeights) -> f64 {
    let (lc, lp) = lambda_schedules(epoch, weights);
    weights.finetune_focal * t.focal + lc * t.corrupt + lp * t.preserve + weights.finetune_physics * t.physics
}
