//! Per-thread accounting of tensor storage.
//!
//! Every [`Tensor`](super::Tensor) buffer registers its size here on creation
//! and deregisters on drop. Training runs are single-threaded per model
//! instance, so the per-thread high-water mark is the peak working set of a
//! run (parameters, activations, gradients and optimizer moments).

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn register(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live size.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|peak| peak.set(now));
}

/// Measures the peak storage growth above the starting level while `f` runs.
pub fn measure_peak<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let prev_peak = peak_bytes();
    let start = live_bytes();
    reset_peak();
    let out = f();
    let grown = peak_bytes().saturating_sub(start);
    PEAK.with(|peak| peak.set(peak.get().max(prev_peak)));
    (out, grown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn tensors_are_counted_and_released() {
        let before = live_bytes();
        let (_, peak) = measure_peak(|| {
            let t = Tensor::zeros(&[128]);
            assert_eq!(live_bytes(), before + 128 * 8);
            drop(t);
        });
        assert_eq!(live_bytes(), before);
        assert_eq!(peak, 128 * 8);
    }
}
