//! Per-thread accounting of attention-matrix allocations.

use std::cell::Cell;

thread_local! {
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static TOTAL: Cell<usize> = const { Cell::new(0) };
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Largest single attention matrix, in `f32` elements.
    pub peak_elements: usize,
    pub total_elements: usize,
    pub calls: usize,
}

pub(crate) fn record_attention_alloc(elements: usize) {
    PEAK.with(|p| p.set(p.get().max(elements)));
    TOTAL.with(|t| t.set(t.get() + elements));
    CALLS.with(|c| c.set(c.get() + 1));
}

pub fn reset_attention_stats() {
    PEAK.with(|p| p.set(0));
    TOTAL.with(|t| t.set(0));
    CALLS.with(|c| c.set(0));
}

pub fn attention_stats() -> AttentionStats {
    AttentionStats {
        peak_elements: PEAK.with(Cell::get),
        total_elements: TOTAL.with(Cell::get),
        calls: CALLS.with(Cell::get),
    }
}
