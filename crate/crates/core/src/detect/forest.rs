// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{ceil, ln, log2, powf};
use crate::rng::{uniform, uniform_int};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average unsuccessful-search path length in a binary search tree of `n` points.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = (n - 1) as f64;
            2.0 * (ln(m) + EULER_GAMMA) - 2.0 * m / n as f64
        }
    }
}

/// Valid `(Q, H)` pairs standardized within the window, with their indices.
pub(crate) fn standardized_pairs(q: &[f64], h: &[f64]) -> (Vec<usize>, Vec<[f64; 2]>) {
    let idx: Vec<usize> = (0..q.len()).filter(|&t| q[t].is_finite() && h[t].is_finite()).collect();
    let z = |x: &[f64]| -> Vec<f64> {
        let v: Vec<f64> = idx.iter().map(|&t| x[t]).collect();
        match crate::math::mean_std(&v) {
            Some((m, s)) if s > 0.0 => v.iter().map(|a| (a - m) / s).collect(),
            _ => alloc::vec![0.0; v.len()],
        }
    };
    let (zq, zh) = (z(q), z(h));
    (idx, zq.into_iter().zip(zh).map(|(a, b)| [a, b]).collect())
}

enum Node {
    Leaf {
        size: usize,
    },
    Split {
        dim: usize,
        at: f64,
        left: usize,
        right: usize,
    },
}

struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn grow<R: Rng + ?Sized>(points: &[[f64; 2]], members: Vec<usize>, limit: usize, rng: &mut R) -> Tree {
        let mut t = Tree { nodes: Vec::new() };
        t.build(points, members, 0, limit, rng);
        t
    }

    fn build<R: Rng + ?Sized>(
        &mut self,
        p: &[[f64; 2]],
        members: Vec<usize>,
        depth: usize,
        limit: usize,
        rng: &mut R,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: members.len() });
        if depth >= limit || members.len() <= 1 {
            return id;
        }
        let span = |d: usize| {
            let lo = members.iter().map(|&i| p[i][d]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|&i| p[i][d]).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        let dims: Vec<usize> = (0..2).filter(|&d| span(d).1 > span(d).0).collect();
        if dims.is_empty() {
            return id;
        }
        let dim = dims[uniform_int(rng, 0, dims.len() - 1)];
        let (lo, hi) = span(dim);
        let at = uniform(rng, lo, hi);
        let (l, r): (Vec<usize>, Vec<usize>) = members.into_iter().partition(|&i| p[i][dim] < at);
        let left = self.build(p, l, depth + 1, limit, rng);
        let right = self.build(p, r, depth + 1, limit, rng);
        self.nodes[id] = Node::Split { dim, at, left, right };
        id
    }

    fn path_length(&self, x: [f64; 2]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth + c_factor(size),
                Node::Split { dim, at, left, right } => {
                    node = if x[dim] < at { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Isolation-forest anomaly scores `2^(-E[h(x)] / c(psi))` on standardized
/// `(Q, H)` pairs; missing timesteps score 0.
pub fn isolation_forest_scores<R: Rng + ?Sized>(
    q: &[f64],
    h: &[f64],
    trees: usize,
    subsample: usize,
    rng: &mut R,
) -> Result<alloc::vec::Vec<f64>> {
    let (idx, pts) = standardized_pairs(q, h);
    if pts.len() < 2 {
        return Err(Error::insufficient("isolation forest needs at least two valid points"));
    }
    if trees == 0 {
        return Err(Error::invalid("isolation forest needs at least one tree"));
    }
    let psi = subsample.min(pts.len()).max(2);
    let limit = ceil(log2(psi as f64)) as usize;
    let forest: Vec<Tree> = (0..trees)
        .map(|_| Tree::grow(&pts, sample(rng, pts.len(), psi).into_vec(), limit, rng))
        .collect();
    let c = c_factor(psi);
    let mut scores = alloc::vec![0.0; q.len()];
    for (k, &t) in idx.iter().enumerate() {
        let mean_h = forest.iter().map(|tr| tr.path_length(pts[k])).sum::<f64>() / trees as f64;
        scores[t] = powf(2.0, -mean_h / c);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::FlagRule;
    use crate::rng::{normal, rng_from_seed};

    #[test]
    fn far_points_score_highest() {
        let mut rng = rng_from_seed(4);
        let mut q: Vec<f64> = (0..95).map(|_| 10.0 + 0.1 * normal(&mut rng)).collect();
        let mut h: Vec<f64> = (0..95).map(|_| 2.0 + 0.1 * normal(&mut rng)).collect();
        for k in 0..5 {
            q.push(30.0 + 3.0 * k as f64);
            h.push(if k % 2 == 0 { 8.0 } else { -4.0 });
        }
        let s = isolation_forest_scores(&q, &h, 100, 256, &mut rng_from_seed(1)).unwrap();
        let flags = FlagRule::TopK(ceil(0.05 * 100.0) as usize).apply(&s);
        assert_eq!(
            flags
                .iter()
                .enumerate()
                .filter(|(_, f)| **f)
                .map(|(i, _)| i)
                .collect::<Vec<_>>(),
            [95, 96, 97, 98, 99]
        );
    }

    #[test]
    fn identical_points_tie() {
        let s = isolation_forest_scores(&[3.0; 40], &[1.0; 40], 10, 256, &mut rng_from_seed(1)).unwrap();
        assert!(s.iter().all(|&v| v == s[0]));
        let flags = FlagRule::TopK(4).apply(&s);
        assert_eq!(flags.iter().position(|f| !f), Some(4));
    }

    #[test]
    fn single_point_is_an_error() {
        assert!(isolation_forest_scores(&[1.0], &[1.0], 100, 256, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn c_factor_values() {
        assert_eq!(c_factor(2), 1.0);
        assert!((c_factor(256) - 10.244_770_920_119_917).abs() < 1e-9);
    }
}
