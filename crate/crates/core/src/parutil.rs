//! Deterministic parallel reduction.
//!
//! Work is cut into fixed-size shards; shards are mapped in parallel
//! but folded strictly in shard order, so the floating-point result is
//! identical for any thread count. Memory stays bounded because only
//! one wave of shard results is alive at a time.

use rayon::prelude::*;

/// Maps `map` over fixed-size chunks of `items` in parallel and folds
/// the per-shard results in shard order.
pub(crate) fn ordered_shard_sum<T, A, M, F>(
    items: &[T],
    shard_size: usize,
    zero: A,
    map: M,
    fold: F,
) -> A
where
    T: Sync,
    A: Send,
    M: Fn(&[T]) -> A + Sync,
    F: Fn(A, A) -> A,
{
    assert!(shard_size > 0, "shard size must be positive");
    let shards: Vec<&[T]> = items.chunks(shard_size).collect();
    let wave = rayon::current_num_threads().max(1) * 2;
    let mut acc = zero;
    for group in shards.chunks(wave) {
        let results: Vec<A> = group.par_iter().map(|shard| map(shard)).collect();
        for r in results {
            acc = fold(acc, r);
        }
    }
    acc
}
