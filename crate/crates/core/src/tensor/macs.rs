//! Multiply-accumulate counter for the forward kernels.
//!
//! Counts are thread-local, so concurrently running tests and workers do not
//! interfere. Only forward passes of `matmul`, `batched_matmul`, `conv2d` and
//! the scaled affine ops are counted; backward passes and parameter sampling
//! are not.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    MACS.with(|c| c.get())
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

/// Runs `f` and returns its result together with the MACs it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
