// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-hidden-layer GELU network mapping detection features to a
//! per-timestep anomaly probability, with exact backpropagation.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{DetectionFeatures, FEATURE_LAYOUT_VERSION, N_DETECTION_FEATURES};
use crate::error::{Error, Result};
use crate::math::{erf, exp, sigmoid, sqrt};
use crate::rng::uniform;

pub const IN: usize = N_DETECTION_FEATURES;
pub const H1: usize = 128;
pub const H2: usize = 64;

// Offsets into the flat parameter vector. Weights are stored input-major:
// `w1[i * H1 + j]` connects input `i` to hidden unit `j`.
pub const W1: usize = 0;
pub const B1: usize = W1 + IN * H1;
pub const W2: usize = B1 + H1;
pub const B2: usize = W2 + H1 * H2;
pub const W3: usize = B2 + H2;
pub const B3: usize = W3 + H2;
pub const N_PARAMS: usize = B3 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Dropout off; deterministic.
    Eval,
    /// Dropout active at inference for MC sampling.
    Mc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub layout: u32,
    pub hidden: [usize; 2],
    pub dropout_p: f64,
    /// Decision threshold on the probability, chosen on held-out data.
    pub threshold: f64,
    pub params: Vec<f64>,
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * exp(-0.5 * x * x)
}

/// Activations kept for the backward pass.
pub struct Trace {
    z1: [f64; H1],
    m1: [f64; H1],
    d1: [f64; H1],
    z2: [f64; H2],
    m2: [f64; H2],
    d2: [f64; H2],
    pub logit: f64,
}

impl MlpHead {
    pub fn zeros(dropout_p: f64) -> Self {
        MlpHead {
            layout: FEATURE_LAYOUT_VERSION,
            hidden: [H1, H2],
            dropout_p,
            threshold: 0.5,
            params: vec![0.0; N_PARAMS],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dropout_p: f64, rng: &mut R) -> Self {
        let mut head = MlpHead::zeros(dropout_p);
        for (off, fan_in, fan_out) in [(W1, IN, H1), (W2, H1, H2), (W3, H2, 1)] {
            let lim = sqrt(6.0 / (fan_in + fan_out) as f64);
            for v in &mut head.params[off..off + fan_in * fan_out] {
                *v = uniform(rng, -lim, lim);
            }
        }
        head
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != N_PARAMS || self.hidden != [H1, H2] {
            return Err(Error::invalid("head has the wrong shape"));
        }
        if self.layout != FEATURE_LAYOUT_VERSION {
            return Err(Error::invalid("head was trained on a different feature layout"));
        }
        if let Some(v) = self.params.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "head parameters",
                value: *v,
            });
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout probability must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Forward pass for one timestep; draws inverted-dropout masks when
    /// `dropout` is set and `dropout_p > 0`.
    pub fn forward_one<R: Rng + ?Sized>(&self, x: &[f64; IN], dropout: bool, rng: &mut R) -> Trace {
        let p = &self.params;
        let keep = 1.0 - self.dropout_p;
        let mut mask = |m: &mut [f64]| {
            if dropout && self.dropout_p > 0.0 {
                for v in m.iter_mut() {
                    *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
            }
        };
        let mut z1 = [0.0; H1];
        z1.copy_from_slice(&p[B1..B1 + H1]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &p[W1 + i * H1..W1 + (i + 1) * H1];
                for (z, w) in z1.iter_mut().zip(row) {
                    *z += xi * w;
                }
            }
        }
        let mut m1 = [1.0; H1];
        mask(&mut m1);
        let mut d1 = [0.0; H1];
        for j in 0..H1 {
            d1[j] = gelu(z1[j]) * m1[j];
        }
        let mut z2 = [0.0; H2];
        z2.copy_from_slice(&p[B2..B2 + H2]);
        for (j, &a) in d1.iter().enumerate() {
            if a != 0.0 {
                let row = &p[W2 + j * H2..W2 + (j + 1) * H2];
                for (z, w) in z2.iter_mut().zip(row) {
                    *z += a * w;
                }
            }
        }
        let mut m2 = [1.0; H2];
        mask(&mut m2);
        let mut d2 = [0.0; H2];
        for k in 0..H2 {
            d2[k] = gelu(z2[k]) * m2[k];
        }
        let logit = p[B3] + d2.iter().zip(&p[W3..W3 + H2]).map(|(a, w)| a * w).sum::<f64>();
        Trace {
            z1,
            m1,
            d1,
            z2,
            m2,
            d2,
            logit,
        }
    }

    /// Accumulates `g_logit * d logit / d params` into `grad`.
    pub fn backward_one(&self, x: &[f64; IN], tr: &Trace, g_logit: f64, grad: &mut [f64]) {
        let p = &self.params;
        grad[B3] += g_logit;
        let mut g_z2 = [0.0; H2];
        for k in 0..H2 {
            grad[W3 + k] += g_logit * tr.d2[k];
            let g_d2 = g_logit * p[W3 + k];
            g_z2[k] = g_d2 * tr.m2[k] * gelu_grad(tr.z2[k]);
        }
        for k in 0..H2 {
            grad[B2 + k] += g_z2[k];
        }
        let mut g_z1 = [0.0; H1];
        for j in 0..H1 {
            let a = tr.d1[j];
            let row = W2 + j * H2;
            let mut g_d1 = 0.0;
            for k in 0..H2 {
                grad[row + k] += a * g_z2[k];
                g_d1 += p[row + k] * g_z2[k];
            }
            g_z1[j] = g_d1 * tr.m1[j] * gelu_grad(tr.z1[j]);
        }
        for j in 0..H1 {
            grad[B1 + j] += g_z1[j];
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = W1 + i * H1;
                for j in 0..H1 {
                    grad[row + j] += xi * g_z1[j];
                }
            }
        }
    }
}

/// Per-timestep probabilities. Dropout is active in `Train` and `Mc`.
pub fn mlp_forward<R: Rng + ?Sized>(f: &DetectionFeatures, head: &MlpHead, mode: Mode, rng: &mut R) -> Vec<f64> {
    let dropout = !matches!(mode, Mode::Eval);
    f.values
        .iter()
        .map(|x| sigmoid(head.forward_one(x, dropout, rng).logit))
        .collect()
}

/// MC-dropout mean and standard deviation over `passes` forward passes.
pub fn mlp_mc<R: Rng + ?Sized>(
    f: &DetectionFeatures,
    head: &MlpHead,
    passes: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let n = f.len();
    let (mut mean, mut m2) = (vec![0.0; n], vec![0.0; n]);
    let passes = passes.max(1);
    for k in 1..=passes {
        for (t, p) in mlp_forward(f, head, Mode::Mc, rng).into_iter().enumerate() {
            let d = p - mean[t];
            mean[t] += d / k as f64;
            m2[t] += d * (p - mean[t]);
        }
    }
    let std = m2.iter().map(|v| sqrt(v / passes as f64)).collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from_seed};

    fn feats(n: usize, seed: u64) -> DetectionFeatures {
        let mut rng = rng_from_seed(seed);
        DetectionFeatures {
            layout: FEATURE_LAYOUT_VERSION,
            values: (0..n).map(|_| core::array::from_fn(|_| normal(&mut rng))).collect(),
        }
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut head = MlpHead::zeros(0.2);
        head.params[B3] = 0.7;
        let p = mlp_forward(&feats(5, 1), &head, Mode::Eval, &mut rng_from_seed(0));
        assert!(p.iter().all(|&v| v == sigmoid(0.7)));
    }

    #[test]
    fn eval_is_deterministic() {
        let head = MlpHead::init(0.2, &mut rng_from_seed(3));
        let f = feats(20, 2);
        assert_eq!(
            mlp_forward(&f, &head, Mode::Eval, &mut rng_from_seed(1)),
            mlp_forward(&f, &head, Mode::Eval, &mut rng_from_seed(2))
        );
    }

    #[test]
    fn mc_without_dropout_has_zero_spread() {
        let head = MlpHead::init(0.0, &mut rng_from_seed(3));
        let (_, sd) = mlp_mc(&feats(20, 2), &head, 10, &mut rng_from_seed(1));
        assert!(sd.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.3, 2.0] {
            let e = 1e-6;
            let fd = (gelu(x + e) - gelu(x - e)) / (2.0 * e);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
