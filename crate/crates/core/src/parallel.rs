//! Sample-level parallelism. Results come back in input order, and every
//! work item draws from its own keyed stream, so the job count never
//! changes a result.

use rayon::prelude::*;

/// Maps `f` over `items` on `jobs` threads (0 = one per core).
pub fn map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if jobs == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}
