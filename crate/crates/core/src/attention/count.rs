//! Exact attended key-value pair counts, the unit of the complexity analysis.

use std::collections::HashMap;

use super::global::global_segments;
use super::{AttentionMode, PackedBatch};

/// `l·(2r+1) − r(r+1)` with the radius clipped to `l − 1`: band pairs of one
/// unpadded segment of length `l`.
pub fn local_pairs_closed_form(l: u64, r: u64) -> u64 {
    if l == 0 {
        return 0;
    }
    let r = r.min(l - 1);
    l * (2 * r + 1) - r * (r + 1)
}

/// `l·ceil(l/k)`: token-to-global pairs of one unpadded segment.
pub fn global_pairs_closed_form(l: u64, k: u64) -> u64 {
    l * l.div_ceil(k)
}

/// Maximal runs of equal non-zero segment id: (segment, length).
fn runs(segment_ids: &[u32]) -> Vec<(u32, u64)> {
    let mut out: Vec<(u32, u64)> = Vec::new();
    let mut prev = 0u32;
    for &s in segment_ids {
        if s != 0 {
            match out.last_mut() {
                Some((seg, n)) if *seg == s && prev == s => *n += 1,
                _ => out.push((s, 1)),
            }
        }
        prev = s;
    }
    out
}

/// Number of allowed (query, key) pairs for one sequence.
///
/// Without a `batch` the sequence is a single unpadded segment of length `l`.
/// Counts are computed per segment run from closed forms; they equal the
/// popcounts of the corresponding masks.
pub fn count_kv_pairs(l: usize, r: usize, k: usize, mode: AttentionMode, batch: Option<&PackedBatch>) -> u64 {
    let owned;
    let batch = match batch {
        Some(b) => b,
        None => {
            owned = PackedBatch::single(vec![0; l]);
            &owned
        }
    };
    let segs = runs(&batch.segment_ids);
    match mode {
        AttentionMode::Dense => segs.iter().map(|&(_, n)| n * n).sum(),
        AttentionMode::Local => segs.iter().map(|&(_, n)| local_pairs_closed_form(n, r as u64)).sum(),
        AttentionMode::TGlobal => {
            let local: u64 = segs.iter().map(|&(_, n)| local_pairs_closed_form(n, r as u64)).sum();
            let mut owned_blocks: HashMap<u32, u64> = HashMap::new();
            for s in global_segments(batch, k.max(1)) {
                if s != 0 {
                    *owned_blocks.entry(s).or_default() += 1;
                }
            }
            let global: u64 = segs
                .iter()
                .map(|&(s, n)| n * owned_blocks.get(&s).copied().unwrap_or(0))
                .sum();
            local + global
        }
    }
}
