//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon
//! global pool; without it every [`Exec`] runs sequentially. Results are
//! always returned in input order, so outputs do not depend on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable capping worker parallelism.
pub const THREADS_ENV: &str = "DIFFATTN_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Maps `f` over `0..n`, preserving index order in the output.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn map<I, R, F>(self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }
}

/// Configures the global worker pool from `threads` or `DIFFATTN_THREADS`.
///
/// Returns the number of workers in effect. Calling it after the pool has
/// been initialised is harmless; the existing pool is kept.
pub fn init_threads(threads: Option<usize>) -> usize {
    let requested = threads.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    });
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        1
    }
}

/// Splits `out` into rows of `row_len` and fills each with `f(row_index, row)`.
/// Runs in parallel only when `parallel` is set and the feature is enabled.
pub(crate) fn for_each_row<T, F>(out: &mut [T], row_len: usize, parallel: bool, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = parallel;
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let seq = Exec::Sequential.map_range(100, |i| i * i);
        let par = Exec::Parallel.map_range(100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn row_fill_matches_sequential() {
        let mut a = vec![0usize; 12];
        let mut b = vec![0usize; 12];
        for_each_row(&mut a, 3, true, |i, row| row.iter_mut().for_each(|x| *x = i));
        for_each_row(&mut b, 3, false, |i, row| row.iter_mut().for_each(|x| *x = i));
        assert_eq!(a, b);
        assert_eq!(a[11], 3);
    }
}
