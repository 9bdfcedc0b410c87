//! Thread-local multiply-add counter fed by the matrix kernels.
//!
//! Every call into the dense matrix product adds `m·k·n` to the counter of
//! the calling thread. Benchmarks reset it around the region they measure.

use std::cell::Cell;

thread_local! {
    static MULTIPLY_ADDS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(count: usize) {
    MULTIPLY_ADDS.with(|c| c.set(c.get() + count as u64));
}

pub fn reset() {
    MULTIPLY_ADDS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    MULTIPLY_ADDS.with(Cell::get)
}

/// Runs `f` and returns its result with the multiply-adds it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
