//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature the work is spread over a rayon pool of
//! `jobs` threads; without it (or with `jobs <= 1`) items run in order on the
//! calling thread. Results always come back in input order, so outputs do not
//! depend on scheduling as long as `f` itself is deterministic.

/// Maps `f` over `items` in order on the current thread.
pub fn map_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `items` on a pool of `jobs` threads, keeping input order.
#[cfg(feature = "parallel")]
pub fn map_par<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => map_seq(items, f),
    }
}

/// Parallel when the feature is on and `jobs > 1`, sequential otherwise.
pub fn map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        return map_par(items, jobs, f);
    }
    let _ = jobs;
    map_seq(items, f)
}

/// Number of worker threads the machine offers, at least 1.
pub fn available_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map_seq(&items, |x| x * x);
        for jobs in [1, 2, 4, 8] {
            assert_eq!(map(&items, jobs, |x| x * x), seq);
        }
    }

    #[test]
    fn empty_input() {
        let items: Vec<u8> = Vec::new();
        assert!(map(&items, 4, |x| *x).is_empty());
    }
}
