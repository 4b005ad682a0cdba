//! Live-byte accounting for tensor buffers.
//!
//! Every tensor buffer registers its size on allocation and unregisters on
//! drop. The counters are thread-local: a training step or benchmark run owns
//! one thread, so concurrent tests never pollute each other's measurements.
//! An optional budget turns oversized allocations into recoverable errors,
//! which the benchmark harness reports as out-of-memory cells.

use std::cell::Cell;

use super::TensorError;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static BUDGET: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Bytes currently held by tensor buffers on this thread.
pub fn live() -> usize {
    LIVE.with(|c| c.get())
}

/// High-water mark of live bytes since the last [`reset_peak`].
pub fn peak() -> usize {
    PEAK.with(|c| c.get())
}

/// Reset the high-water mark to the current live count.
pub fn reset_peak() {
    let now = live();
    PEAK.with(|c| c.set(now));
}

/// Cap allocations on this thread; `None` removes the cap.
pub fn set_budget(bytes: Option<usize>) {
    BUDGET.with(|c| c.set(bytes));
}

pub fn budget() -> Option<usize> {
    BUDGET.with(|c| c.get())
}

/// Runs `f` with a temporary budget, restoring the previous one afterwards.
pub fn with_budget<R>(bytes: Option<usize>, f: impl FnOnce() -> R) -> R {
    let prev = budget();
    set_budget(bytes);
    let out = f();
    set_budget(prev);
    out
}

pub(crate) fn register(bytes: usize) -> Result<(), TensorError> {
    let after = live() + bytes;
    if let Some(cap) = budget() {
        if after > cap {
            return Err(TensorError::BudgetExceeded {
                requested: bytes,
                live: live(),
                budget: cap,
            });
        }
    }
    LIVE.with(|c| c.set(after));
    PEAK.with(|c| {
        if after > c.get() {
            c.set(after);
        }
    });
    Ok(())
}

pub(crate) fn unregister(bytes: usize) {
    LIVE.with(|c| c.set(c.get().saturating_sub(bytes)));
}
