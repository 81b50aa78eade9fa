// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;

use super::forest::standardized_pairs;
use crate::error::{Error, Result};
use crate::math::sqrt;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    sqrt(dx * dx + dy * dy)
}

/// Local outlier factors with the k-distance neighbourhood (ties included).
pub fn lof_points(p: &[[f64; 2]], k: usize) -> Result<Vec<f64>> {
    let n = p.len();
    if k == 0 || k >= n {
        return Err(Error::invalid("LOF needs 0 < k < number of points"));
    }
    let mut kdist = vec![0.0; n];
    let mut hoods: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(p[i], p[j]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let kd = d[k - 1].0;
        kdist[i] = kd;
        hoods.push(d.iter().take_while(|(x, _)| *x <= kd).map(|(_, j)| *j).collect());
    }
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let reach: f64 = hoods[i].iter().map(|&j| dist(p[i], p[j]).max(kdist[j])).sum();
            1.0 / (reach / hoods[i].len() as f64).max(1e-10)
        })
        .collect();
    Ok((0..n)
        .map(|i| hoods[i].iter().map(|&j| lrd[j]).sum::<f64>() / (hoods[i].len() as f64 * lrd[i]))
        .collect())
}

/// LOF on standardized `(Q, H)` pairs; missing timesteps score 0.
pub fn lof_scores(q: &[f64], h: &[f64], k: usize) -> Result<Vec<f64>> {
    let (idx, pts) = standardized_pairs(q, h);
    let lof = lof_points(&pts, k)?;
    let mut out = vec![0.0; q.len()];
    for (&t, v) in idx.iter().zip(lof) {
        out[t] = v;
    }
    Ok(out)
}
