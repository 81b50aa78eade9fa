// SPDX-License-Identifier: MIT OR Apache-2.0

//! Power-law stage-discharge ratings `Q = a (H - H0)^b`, fitted in log space.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{abs, exp, ln, mean, powf, sqrt};

/// Fitted rating curve with its log-space residual spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingFit {
    pub a: f64,
    pub b: f64,
    pub h0: f64,
    pub resid_std: f64,
    #[serde(default)]
    pub inlier_fraction: f64,
}

impl RatingFit {
    /// Predicted `ln Q`, or `None` where `H <= H0`.
    pub fn predict_ln_q(&self, h: f64) -> Option<f64> {
        (h > self.h0).then(|| ln(self.a) + self.b * ln(h - self.h0))
    }

    pub fn predict_q(&self, h: f64) -> Option<f64> {
        self.predict_ln_q(h).map(exp)
    }

    /// Stage producing discharge `q`; `H0` for non-positive discharge.
    pub fn invert(&self, q: f64) -> f64 {
        if q > 0.0 {
            self.h0 + powf(q / self.a, 1.0 / self.b)
        } else {
            self.h0
        }
    }

    /// Log-space residual `ln Q - prediction`.
    pub fn log_residual(&self, h: f64, q: f64) -> Option<f64> {
        if q > 0.0 {
            self.predict_ln_q(h).map(|p| ln(q) - p)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the absolute log residual.
    pub inlier_threshold: f64,
    /// Minimum fraction of points the winning model must explain.
    pub min_inlier_fraction: f64,
    pub min_points: usize,
    /// Datum search; `None` fits `ln Q = ln a + b ln H` with `H0 = 0`.
    pub datum_grid: Option<DatumGrid>,
    /// Cap on points used to score candidate models.
    pub max_score_points: usize,
}

/// Equally spaced datum candidates `min(H) - below_max ..= min(H) - below_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatumGrid {
    pub steps: usize,
    pub below_max: f64,
    pub below_min: f64,
}

impl Default for DatumGrid {
    fn default() -> Self {
        DatumGrid {
            steps: 50,
            below_max: 2.0,
            below_min: 0.01,
        }
    }
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 1000,
            inlier_threshold: 0.15,
            min_inlier_fraction: 0.5,
            min_points: 200,
            datum_grid: Some(DatumGrid::default()),
            max_score_points: 4096,
        }
    }
}

/// Ordinary least squares of `y` on `x`: `(intercept, slope, sse)`.
pub fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    Some((intercept, slope, sse))
}

/// Theil–Sen estimator: median pairwise slope, median intercept.
pub fn theil_sen(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    let mut slopes = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[j] - x[i];
            if abs(dx) > 1e-12 {
                slopes.push((y[j] - y[i]) / dx);
            }
        }
    }
    if slopes.is_empty() {
        return None;
    }
    let slope = median_in_place(&mut slopes);
    let mut intercepts: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| b - slope * a).collect();
    let intercept = median_in_place(&mut intercepts);
    Some((intercept, slope))
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    }
}

struct Points {
    h: Vec<f64>,
    ln_q: Vec<f64>,
}

fn collect_points(h: &[f64], q: &[f64], require_positive_h: bool) -> Points {
    let mut pts = Points {
        h: Vec::new(),
        ln_q: Vec::new(),
    };
    for (&hh, &qq) in h.iter().zip(q) {
        if hh.is_finite() && qq.is_finite() && qq > 0.0 && (!require_positive_h || hh > 0.0) {
            pts.h.push(hh);
            pts.ln_q.push(ln(qq));
        }
    }
    pts
}

fn sse_at(h: &[f64], ln_q: &[f64], idx: &[usize], h0: f64) -> Option<(f64, f64, f64)> {
    let x: Vec<f64> = idx.iter().map(|&i| ln(h[i] - h0)).collect();
    let y: Vec<f64> = idx.iter().map(|&i| ln_q[i]).collect();
    ols(&x, &y)
}

/// Robust rating fit: RANSAC over minimal two-point samples (datum drawn
/// from the grid), then least squares on the winning inlier set with the
/// datum refined by golden-section search.
pub fn fit_rating_ransac<R: Rng + ?Sized>(h: &[f64], q: &[f64], cfg: &RansacConfig, rng: &mut R) -> Result<RatingFit> {
    let pts = collect_points(h, q, cfg.datum_grid.is_none());
    let n = pts.h.len();
    if n < cfg.min_points.max(2) {
        return Err(Error::insufficient(alloc::format!(
            "{n} valid (H, Q) pairs, need {}",
            cfg.min_points.max(2)
        )));
    }
    let q_spread = crate::math::std_dev(&pts.ln_q).unwrap_or(0.0);
    let h_spread = crate::math::std_dev(&pts.h).unwrap_or(0.0);
    if q_spread <= 0.0 {
        return Err(Error::FitFailed("discharge is constant; exponent indeterminate".into()));
    }
    if h_spread <= 0.0 {
        return Err(Error::FitFailed("stage is constant".into()));
    }

    let h_min = pts.h.iter().copied().fold(f64::INFINITY, f64::min);
    let grid: Vec<f64> = match cfg.datum_grid {
        Some(g) if g.steps > 1 => (0..g.steps)
            .map(|i| h_min - g.below_max + (g.below_max - g.below_min) * i as f64 / (g.steps - 1) as f64)
            .collect(),
        Some(g) => alloc::vec![h_min - g.below_min],
        None => alloc::vec![0.0],
    };

    let mut order: Vec<usize> = (0..n).collect();
    let scored: Vec<usize> = if n > cfg.max_score_points {
        order.shuffle(rng);
        let mut s = order[..cfg.max_score_points].to_vec();
        s.sort_unstable();
        s
    } else {
        order
    };

    let thr = cfg.inlier_threshold;
    let mut best: Option<(usize, f64, f64, f64)> = None; // (count, h0, ln_a, b)
    for _ in 0..cfg.iterations {
        let h0 = grid[rng.random_range(0..grid.len())];
        let i = scored[rng.random_range(0..scored.len())];
        let j = scored[rng.random_range(0..scored.len())];
        if i == j {
            continue;
        }
        let (xi, xj) = (ln(pts.h[i] - h0), ln(pts.h[j] - h0));
        if !(abs(xi - xj) > 1e-12) {
            continue;
        }
        let b = (pts.ln_q[i] - pts.ln_q[j]) / (xi - xj);
        if !(b > 0.0 && b.is_finite()) {
            continue;
        }
        let ln_a = pts.ln_q[i] - b * xi;
        let count = scored
            .iter()
            .filter(|&&k| abs(pts.ln_q[k] - ln_a - b * ln(pts.h[k] - h0)) <= thr)
            .count();
        if best.map_or(true, |(c, ..)| count > c) {
            best = Some((count, h0, ln_a, b));
        }
    }
    let Some((_, h0, ln_a, b)) = best else {
        return Err(Error::FitFailed("no admissible minimal sample".into()));
    };

    let inliers_of = |h0: f64, ln_a: f64, b: f64| -> Vec<usize> {
        (0..n)
            .filter(|&k| pts.h[k] > h0 && abs(pts.ln_q[k] - ln_a - b * ln(pts.h[k] - h0)) <= thr)
            .collect()
    };
    let inliers = inliers_of(h0, ln_a, b);
    let min_needed = cfg.min_inlier_fraction * n as f64;
    if (inliers.len() as f64) < min_needed {
        return Err(Error::FitFailed(alloc::format!(
            "best model explains {} of {n} points",
            inliers.len()
        )));
    }

    // Datum refinement on the inlier set.
    let refined_h0 = if grid.len() > 1 {
        let sse = |d: f64| sse_at(&pts.h, &pts.ln_q, &inliers, d).map_or(f64::INFINITY, |r| r.2);
        let (g, _) = grid
            .iter()
            .enumerate()
            .map(|(g, &d)| (g, sse(d)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let inlier_min = inliers.iter().map(|&k| pts.h[k]).fold(f64::INFINITY, f64::min);
        let lo = if g > 0 {
            grid[g - 1]
        } else {
            grid[0] - (grid[1] - grid[0])
        };
        let hi = if g + 1 < grid.len() { grid[g + 1] } else { grid[g] };
        let hi = hi.min(inlier_min - 1e-9);
        golden_min(sse, lo, hi.max(lo), 1e-12)
    } else {
        grid[0]
    };

    let (ln_a, b, _) = sse_at(&pts.h, &pts.ln_q, &inliers, refined_h0)
        .ok_or_else(|| Error::FitFailed("degenerate inlier set".into()))?;
    let final_inliers = inliers_of(refined_h0, ln_a, b);
    if (final_inliers.len() as f64) < min_needed {
        return Err(Error::FitFailed("refined model lost its inlier support".into()));
    }
    let (ln_a, b, _) = sse_at(&pts.h, &pts.ln_q, &final_inliers, refined_h0)
        .ok_or_else(|| Error::FitFailed("degenerate inlier set".into()))?;
    if !(b.is_finite() && ln_a.is_finite()) {
        return Err(Error::FitFailed("non-finite parameters".into()));
    }
    let resid: Vec<f64> = final_inliers
        .iter()
        .map(|&k| pts.ln_q[k] - ln_a - b * ln(pts.h[k] - refined_h0))
        .collect();
    let m = mean(&resid).unwrap_or(0.0);
    let resid_std = sqrt(resid.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / resid.len() as f64);
    Ok(RatingFit {
        a: exp(ln_a),
        b,
        h0: refined_h0,
        resid_std,
        inlier_fraction: final_inliers.len() as f64 / n as f64,
    })
}

/// Golden-section minimisation on `[lo, hi]`.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if abs(hi - lo) <= tol {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    (lo + hi) / 2.0
}

/// Within-window log-linear rating with a fixed datum `min(H) - offset`,
/// fitted by Theil–Sen. Returns `None` when stage or discharge is degenerate.
pub fn window_rating_theil_sen(h: &[f64], q: &[f64], datum_offset: f64) -> Option<RatingFit> {
    let h_min = h
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !h_min.is_finite() {
        return None;
    }
    let h0 = h_min - datum_offset;
    let (x, y): (Vec<f64>, Vec<f64>) = h
        .iter()
        .zip(q)
        .filter(|(hh, qq)| hh.is_finite() && qq.is_finite() && **qq > 0.0)
        .map(|(&hh, &qq)| (ln(hh - h0), ln(qq)))
        .unzip();
    if x.len() < 3 {
        return None;
    }
    let (ln_a, b) = theil_sen(&x, &y)?;
    if !(b > 0.0 && b.is_finite() && ln_a.is_finite()) {
        return None;
    }
    let resid: Vec<f64> = x.iter().zip(&y).map(|(&a, &c)| c - ln_a - b * a).collect();
    Some(RatingFit {
        a: exp(ln_a),
        b,
        h0,
        resid_std: crate::math::std_dev(&resid).unwrap_or(0.0),
        inlier_fraction: 1.0,
    })
}

/// Within-window rating with the datum chosen from `grid` by least median
/// absolute log residual (Theil–Sen on an evenly spaced subsample of at most
/// 64 points per candidate), then refitted by Theil–Sen on all points.
pub fn window_rating_datum_search(h: &[f64], q: &[f64], grid: &DatumGrid) -> Option<RatingFit> {
    let (hs, ys): (Vec<f64>, Vec<f64>) = h
        .iter()
        .zip(q)
        .filter(|(hh, qq)| hh.is_finite() && qq.is_finite() && **qq > 0.0)
        .map(|(&hh, &qq)| (hh, ln(qq)))
        .unzip();
    if hs.len() < 3 {
        return None;
    }
    let h_min = hs.iter().copied().fold(f64::INFINITY, f64::min);
    let step = hs.len().div_ceil(64);
    let sub: Vec<usize> = (0..hs.len()).step_by(step).collect();
    let mut best: Option<(f64, f64)> = None;
    for k in 0..grid.steps.max(1) {
        let frac = if grid.steps > 1 {
            k as f64 / (grid.steps - 1) as f64
        } else {
            0.0
        };
        let h0 = h_min - (grid.below_min + (grid.below_max - grid.below_min) * frac);
        let xs: Vec<f64> = sub.iter().map(|&i| ln(hs[i] - h0)).collect();
        let yv: Vec<f64> = sub.iter().map(|&i| ys[i]).collect();
        let Some((c, b)) = theil_sen(&xs, &yv) else { continue };
        if !(b > 0.0) {
            continue;
        }
        let mut r: Vec<f64> = hs
            .iter()
            .zip(&ys)
            .map(|(&hh, &y)| abs(y - c - b * ln(hh - h0)))
            .collect();
        let score = median_in_place(&mut r);
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, h0));
        }
    }
    let (_, h0) = best?;
    let x: Vec<f64> = hs.iter().map(|&hh| ln(hh - h0)).collect();
    let (ln_a, b) = theil_sen(&x, &ys)?;
    if !(b > 0.0 && b.is_finite() && ln_a.is_finite()) {
        return None;
    }
    let resid: Vec<f64> = x.iter().zip(&ys).map(|(&a, &c)| c - ln_a - b * a).collect();
    Some(RatingFit {
        a: exp(ln_a),
        b,
        h0,
        resid_std: crate::math::std_dev(&resid).unwrap_or(0.0),
        inlier_fraction: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn ols_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (c, m, sse) = ols(&x, &y).unwrap();
        assert!((c - 1.0).abs() < 1e-12 && (m - 2.0).abs() < 1e-12 && sse < 1e-20);
        assert!(ols(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn theil_sen_ignores_outlier() {
        let x: Vec<f64> = (0..21).map(f64::from).collect();
        let mut y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        y[10] = 500.0;
        let (c, m) = theil_sen(&x, &y).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ransac_recovers_exact_power_law() {
        let h: Vec<f64> = (0..500).map(|i| 1.5 + 3.0 * i as f64 / 499.0).collect();
        let q: Vec<f64> = h.iter().map(|&x| 2.0 * powf(x - 1.0, 1.5)).collect();
        let fit = fit_rating_ransac(&h, &q, &RansacConfig::default(), &mut rng_from_seed(1)).unwrap();
        assert!((fit.a - 2.0).abs() / 2.0 < 1e-6, "{fit:?}");
        assert!((fit.b - 1.5).abs() / 1.5 < 1e-6);
        assert!((fit.h0 - 1.0).abs() < 1e-6);
        assert!(fit.resid_std < 1e-6);
    }

    #[test]
    fn constant_discharge_fails() {
        let h: Vec<f64> = (0..300).map(|i| 2.0 + i as f64 * 0.01).collect();
        let q = alloc::vec![5.0; 300];
        let err = fit_rating_ransac(&h, &q, &RansacConfig::default(), &mut rng_from_seed(1)).unwrap_err();
        assert!(matches!(err, Error::FitFailed(_)));
    }

    #[test]
    fn too_few_points() {
        let h = [2.0, 3.0];
        let q = [1.0, 2.0];
        assert!(matches!(
            fit_rating_ransac(&h, &q, &RansacConfig::default(), &mut rng_from_seed(1)),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn inversion_round_trip() {
        let fit = RatingFit {
            a: 2.0,
            b: 1.5,
            h0: 1.0,
            resid_std: 0.0,
            inlier_fraction: 1.0,
        };
        let q = fit.predict_q(3.0).unwrap();
        assert!((fit.invert(q) - 3.0).abs() < 1e-12);
        assert_eq!(fit.predict_q(0.5), None);
    }
}
