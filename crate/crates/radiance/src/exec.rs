//! Chunked data-parallel execution with a deterministic reduction order.
//!
//! Batches (rays, sample points) are split into a fixed number of chunks that
//! depends only on the batch and parameter sizes, never on the thread count.
//! Chunks are processed independently — in parallel with the `parallel`
//! feature, sequentially without it — and their results are combined in chunk
//! order, so the same inputs produce bit-identical outputs on any machine
//! running the same binary.

use std::cell::Cell;
use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all `map_chunks` calls on this thread forced onto the
/// sequential path. Used by tests and benches to compare code paths.
pub fn sequential_scope<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQUENTIAL.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

/// Cap the worker pool. A no-op without the `parallel` feature; `0` keeps the
/// default (one worker per core).
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    if n > 0 {
        // Ignore the error from initializing twice; the pool is process-wide.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Split `0..n` into at most `max_chunks` contiguous ranges of near-equal size.
pub fn chunk_ranges(n: usize, max_chunks: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let chunks = max_chunks.clamp(1, n);
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for c in 0..chunks {
        let len = base + usize::from(c < rem);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Number of gradient chunks for a batch against a parameter buffer of
/// `param_len` entries. Large buffers (dense voxel grids) get fewer chunks to
/// bound the per-chunk gradient memory.
pub fn grad_chunk_count(param_len: usize) -> usize {
    if param_len > 2_000_000 {
        4
    } else {
        16
    }
}

/// Map `f` over fixed chunks of `0..n`, returning per-chunk results in order.
pub fn map_chunks<R, F>(n: usize, max_chunks: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let ranges = chunk_ranges(n, max_chunks);
    #[cfg(feature = "parallel")]
    {
        if !FORCE_SEQUENTIAL.with(Cell::get) {
            return ranges.into_par_iter().map(f).collect();
        }
    }
    ranges.into_iter().map(f).collect()
}

/// Sequential reference path, always available (used by the bench suite).
pub fn map_chunks_seq<R, F>(n: usize, max_chunks: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    sequential_scope(|| map_chunks(n, max_chunks, f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_and_do_not_overlap() {
        for n in [0usize, 1, 5, 16, 17, 1000] {
            let ranges = chunk_ranges(n, 16);
            let mut next = 0;
            for r in &ranges {
                assert_eq!(r.start, next);
                assert!(!r.is_empty());
                next = r.end;
            }
            assert_eq!(next, n);
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let work = |r: Range<usize>| -> f64 {
            let mut acc = 0.0f64;
            for i in r {
                acc += ((i as f64) * 0.1).sin();
            }
            acc
        };
        let par: Vec<f64> = map_chunks(1234, 16, work);
        let seq: Vec<f64> = map_chunks_seq(1234, 16, work);
        assert_eq!(par.len(), seq.len());
        for (a, b) in par.iter().zip(&seq) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
