// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{centered, median};
use crate::rating::{window_rating_datum_search, DatumGrid, RatingFit};
use crate::window::Window;

/// Reconstructed physical discharge and stage for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    #[serde(with = "crate::series::missing_vec")]
    pub discharge: Vec<f64>,
    #[serde(with = "crate::series::missing_vec")]
    pub stage: Vec<f64>,
    pub rating: Option<RatingFit>,
}

/// Window in, reconstructed `Q`/`H` out. Implementations must be
/// deterministic.
pub trait Reconstructor {
    fn reconstruct(&self, w: &Window) -> Result<Reconstruction>;
}

/// Rating prediction from the other channel blended with a rolling median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceReconstructor {
    pub median_window_h: usize,
    /// Weight on the rating prediction.
    pub blend: f64,
    pub datum_grid: DatumGrid,
}

impl Default for ReferenceReconstructor {
    fn default() -> Self {
        ReferenceReconstructor {
            median_window_h: 25,
            blend: 0.5,
            datum_grid: DatumGrid::default(),
        }
    }
}

pub(crate) fn rolling_median(x: &[f64], win: usize) -> Vec<f64> {
    let (before, after) = (win / 2, win - win / 2 - 1);
    (0..x.len())
        .map(|t| {
            let (a, b) = centered(t, x.len(), before, after);
            median(&x[a..b]).unwrap_or(f64::NAN)
        })
        .collect()
}

impl ReferenceReconstructor {
    pub fn reconstruct_traces(&self, q: &[f64], h: &[f64]) -> Result<Reconstruction> {
        if !q.iter().any(|v| v.is_finite()) || !h.iter().any(|v| v.is_finite()) {
            return Err(Error::insufficient("reconstruction needs observed discharge and stage"));
        }
        let (mq, mh) = (
            rolling_median(q, self.median_window_h),
            rolling_median(h, self.median_window_h),
        );
        let rating = window_rating_datum_search(h, q, &self.datum_grid);
        let w = self.blend;
        let blend = |pred: Option<f64>, med: f64| match pred {
            Some(p) if p.is_finite() && med.is_finite() => w * p + (1.0 - w) * med,
            Some(p) if p.is_finite() => p,
            _ => med,
        };
        let (mut rq, mut rh) = (Vec::with_capacity(q.len()), Vec::with_capacity(q.len()));
        for t in 0..q.len() {
            let pq = rating.and_then(|f| if h[t].is_finite() { f.predict_q(h[t]) } else { None });
            let ph = rating.and_then(|f| (q[t].is_finite() && q[t] > 0.0).then(|| f.invert(q[t])));
            rq.push(blend(pq, mq[t]));
            rh.push(blend(ph, mh[t]));
        }
        Ok(Reconstruction {
            discharge: rq,
            stage: rh,
            rating,
        })
    }
}

impl Reconstructor for ReferenceReconstructor {
    fn reconstruct(&self, w: &Window) -> Result<Reconstruction> {
        self.reconstruct_traces(&w.discharge, &w.stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{powf, sin};

    fn clean() -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = (0..576).map(|t| 3.0 + 0.8 * sin(t as f64 / 60.0)).collect();
        let q = h.iter().map(|&x| 4.0 * powf(x - 1.0, 1.6)).collect();
        (q, h)
    }

    #[test]
    fn clean_window_is_close() {
        let (q, h) = clean();
        let r = ReferenceReconstructor::default().reconstruct_traces(&q, &h).unwrap();
        for t in 0..576 {
            assert!((r.discharge[t] - q[t]).abs() / q[t] < 0.05);
            assert!((r.stage[t] - h[t]).abs() / h[t] < 0.05);
        }
    }

    #[test]
    fn flatline_tracks_rating() {
        let (mut q, h) = clean();
        let frozen = q[200];
        for v in &mut q[200..300] {
            *v = frozen;
        }
        let r = ReferenceReconstructor::default().reconstruct_traces(&q, &h).unwrap();
        let fit = r.rating.unwrap();
        let t = 290;
        let truth = fit.predict_q(h[t]).unwrap();
        assert!((r.discharge[t] - frozen).abs() > 0.2 * (truth - frozen).abs());
    }

    #[test]
    fn all_missing_is_an_error() {
        let (q, _) = clean();
        assert!(ReferenceReconstructor::default()
            .reconstruct_traces(&q, &[f64::NAN; 576])
            .is_err());
    }

    #[test]
    fn degenerate_rating_falls_back_to_median() {
        let r = ReferenceReconstructor::default()
            .reconstruct_traces(&[5.0; 50], &[2.0; 50])
            .unwrap();
        assert!(r.rating.is_none());
        assert!(r.discharge.iter().all(|&v| v == 5.0));
    }
}
