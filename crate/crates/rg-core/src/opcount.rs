//! Thread-local multiply-accumulate counter.
//!
//! The dense matmul kernels tally the exact number of multiply-accumulates
//! they execute. Tests reset the counter around a call and compare the tally
//! against the analytic `attention_op_count` prediction.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Resets this thread's counter to zero.
pub fn reset() {
    MACS.with(|c| c.set(0));
}

/// Multiply-accumulates tallied on this thread since the last reset.
pub fn total() -> u64 {
    MACS.with(|c| c.get())
}
