//! Row-parallel helpers.
//!
//! Work is split by image row and every reduction is done afterwards in a
//! single thread in row-major order, so results do not depend on how many
//! threads run.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MONDI_THREADS";

/// Builds a pool sized by `MONDI_THREADS`, or rayon's default when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw.trim().parse().map_err(|_| Error::Config {
            key: THREADS_ENV.into(),
            message: format!("expected a positive integer, got {raw:?}"),
        })?;
        if n == 0 {
            return Err(Error::Config {
                key: THREADS_ENV.into(),
                message: "must be at least 1".into(),
            });
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Fills `out` row by row; `f` receives the row index and that row's slice.
pub(crate) fn fill_rows<T, F>(out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    out.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(r, row)| f(r, row));
}

/// Sums a slice in index order with Neumaier compensation.
pub(crate) fn ordered_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}
