//! Per-thread accounting of live tensor storage.
//!
//! Every [`Tensor`](super::Tensor) reports its element count on creation and
//! release. The peak is what the benchmark harness calls `peak_live_floats`;
//! it is deterministic for a given computation, unlike process RSS.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static BUDGET: Cell<usize> = const { Cell::new(usize::MAX) };
    static EXCEEDED: Cell<bool> = const { Cell::new(false) };
    static SCORE_PEAK: Cell<usize> = const { Cell::new(0) };
    static KV_PAIRS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn acquire(n: usize) {
    LIVE.with(|live| {
        let now = live.get() + n;
        live.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
        if now > BUDGET.with(Cell::get) {
            EXCEEDED.with(|e| e.set(true));
        }
    });
}

pub(crate) fn release(n: usize) {
    // Tensors moved across threads may be released on a thread that never
    // acquired them.
    LIVE.with(|live| live.set(live.get().saturating_sub(n)));
}

/// Floats currently held by tensors on this thread.
pub fn live() -> usize {
    LIVE.with(Cell::get)
}

/// Highest value of [`live`] since the last [`reset_peak`].
pub fn peak() -> usize {
    PEAK.with(Cell::get)
}

/// Restart peak tracking from the current live count and clear the
/// budget-exceeded flag.
pub fn reset_peak() {
    let now = live();
    PEAK.with(|p| p.set(now));
    EXCEEDED.with(|e| e.set(false));
    SCORE_PEAK.with(|p| p.set(0));
}

/// Install a live-float budget. Crossing it does not abort; it raises a flag
/// read by [`budget_exceeded`].
pub fn set_budget(floats: Option<usize>) {
    BUDGET.with(|b| b.set(floats.unwrap_or(usize::MAX)));
    EXCEEDED.with(|e| e.set(false));
}

pub fn budget_exceeded() -> bool {
    EXCEEDED.with(Cell::get)
}

/// Record the size of one head's attention-score buffer.
pub(crate) fn note_score_buffer(entries: usize) {
    SCORE_PEAK.with(|p| {
        if entries > p.get() {
            p.set(entries)
        }
    });
}

/// Largest per-head score buffer allocated since the last [`reset_peak`].
pub fn score_peak_per_head() -> usize {
    SCORE_PEAK.with(Cell::get)
}

/// Count (query, key) edges actually scored by an attention kernel; kernels
/// report the pairs of their first head only, i.e. per-sequence edges.
pub(crate) fn note_kv_pairs(n: u64) {
    KV_PAIRS.with(|c| c.set(c.get() + n));
}

/// Edges reported through [`note_kv_pairs`] since the last reset.
pub fn kv_pairs() -> u64 {
    KV_PAIRS.with(Cell::get)
}

pub fn reset_kv_pairs() {
    KV_PAIRS.with(|c| c.set(0));
}
