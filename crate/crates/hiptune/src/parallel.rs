//! Data-parallel map helpers. The `parallel` feature switches [`par_map`]
//! onto a rayon pool; the sequential twin is always available so benches can
//! compare the two. Both preserve input order, and callers reduce the
//! collected results sequentially, so outputs are bit-identical whichever
//! path runs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn seq_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

pub fn seq_map_indexed<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    seq_map(items, f)
}

#[cfg(feature = "parallel")]
pub fn par_map_indexed<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    seq_map_indexed(n, f)
}
