//! Data-parallel helpers with a sequential fallback.
//!
//! The `parallel` feature routes these through rayon; without it they run
//! in place. Callers only ever parallelize over disjoint output regions
//! with pre-assigned random streams, so both paths produce bit-identical
//! results — the feature trades wall time, never values.

/// Run `f` over every disjoint `chunk_len`-sized chunk of `out`, passing the
/// chunk index. The final chunk may be shorter.
#[cfg(feature = "parallel")]
pub fn for_each_chunk<T: Send, F>(out: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    use rayon::prelude::*;
    out.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Map indices 0..n into a Vec, computing items independently.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Send + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Whether the parallel path is compiled in (used by benches and logs).
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
