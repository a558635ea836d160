//! Ordered map over indices, data-parallel when the `parallel` feature is on.

/// Maps `f` over `0..n`, returning results in index order.
///
/// `workers = Some(1)` forces the sequential path; `None` uses the global pool.
/// Results never depend on the worker count.
pub fn map_indexed<T, F>(n: usize, workers: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match workers {
            Some(1) => (0..n).map(f).collect(),
            Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
                Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
                Err(e) => {
                    log::warn!("could not build a {w}-thread pool ({e}); running sequentially");
                    (0..n).map(f).collect()
                }
            },
            None => (0..n).into_par_iter().map(f).collect(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        for w in [None, Some(1), Some(3)] {
            let v = map_indexed(100, w, |i| i * i);
            assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
    }
}
