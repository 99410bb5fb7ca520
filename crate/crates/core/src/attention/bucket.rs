//! T5 relative-position bucketing.

fn bucket(rel: i64, num_buckets: usize, max_distance: usize, bidirectional: bool) -> usize {
    let mut ret = 0usize;
    let mut half = num_buckets;
    // T5 measures memory_position - query_position and negates it.
    let mut n = -rel;
    if bidirectional {
        half /= 2;
        if n < 0 {
            ret += half;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let n = n as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return ret + n;
    }
    let log_ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (log_ratio * (half - max_exact) as f64) as usize;
    ret + large.min(half - 1)
}

/// Bidirectional bucket for `rel = key_position − query_position`.
///
/// Half of the buckets serve each sign (keys to the right land in the upper
/// half). Within a half, distances below `num_buckets / 4` get their own
/// bucket; larger ones are spaced logarithmically up to `max_distance` and
/// clamped beyond it.
pub fn relative_position_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    bucket(rel, num_buckets, max_distance, true)
}

/// Unidirectional bucket used by decoder self-attention; keys after the query
/// (which causal masking removes anyway) share bucket 0.
pub fn causal_position_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    bucket(rel, num_buckets, max_distance, false)
}
