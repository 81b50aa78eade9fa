// SPDX-License-Identifier: MIT OR Apache-2.0

use hydroqc_core::detect::Executor;
use rayon::prelude::*;

/// Bounded rayon pool. Results come back in index order, so the worker
/// count never changes output.
pub struct Pool {
    pool: rayon::ThreadPool,
}

impl Pool {
    /// `jobs == 0` uses one worker per available core.
    pub fn new(jobs: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        Pool { pool }
    }

    pub fn jobs(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Pool {
    fn map<T: Send, F: Fn(usize) -> T + Sync + Send>(&self, n: usize, f: F) -> Vec<T> {
        self.pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved() {
        let p = Pool::new(4);
        assert_eq!(p.map(1000, |i| i * 2), (0..1000).map(|i| i * 2).collect::<Vec<_>>());
    }
}
