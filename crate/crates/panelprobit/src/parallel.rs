//! Data-parallel map over unit indices.
//!
//! Every per-unit draw reads only its own RNG substream and writes only its
//! own output slot, so scheduling cannot affect results: the parallel and
//! sequential paths are bit-identical. Cross-unit reductions stay serial for
//! the same reason.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn map_units<T: Send>(
    parallel: bool,
    n: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Vec<T> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_units<T: Send>(
    _parallel: bool,
    n: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Vec<T> {
    (0..n).map(f).collect()
}
