//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the `maybe_*` functions fan
//! work out over the global rayon pool; without it they run in a plain loop.
//! Outputs are always collected in input index order and workers only touch
//! disjoint slabs, so results are bit-identical across thread counts and
//! between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over owned items, parallel when the feature allows it.
pub fn maybe_par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Always-sequential twin of [`maybe_par_map`], kept for benchmarks.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Map over indices `0..n`.
pub fn maybe_par_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Run `f(slab_index, slab)` over disjoint equal slabs of `out`.
/// `out.len()` must be a multiple of `slab`.
pub fn maybe_par_slabs<F>(out: &mut [f64], slab: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(out.len() % slab, 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(slab)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(slab).enumerate().for_each(|(i, chunk)| f(i, chunk));
    }
}

/// Always-sequential twin of [`maybe_par_slabs`], kept for benchmarks.
pub fn seq_slabs<F>(out: &mut [f64], slab: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    debug_assert_eq!(out.len() % slab, 0);
    out.chunks_mut(slab).enumerate().for_each(|(i, chunk)| f(i, chunk));
}
