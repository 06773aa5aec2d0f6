//! Per-thread accounting of tensor buffer bytes.
//!
//! Every [`Storage`](super::Storage) allocation and every convolution
//! scratch buffer is counted here, which gives the memory benchmark a
//! deterministic high-water mark independent of the system allocator.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

pub(crate) fn track_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn track_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as i64));
}

/// Bytes currently held by tensors created on this thread.
pub fn live_bytes() -> i64 {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> i64 {
    PEAK.with(Cell::get)
}

/// Restart high-water tracking from the current live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}
