//! Thread-local floating-point operation counter.
//!
//! Kernels add their analytic operation counts here. The counts depend only on
//! shapes, never on values, so they are exact and reproducible.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn get() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result together with the operations it counted.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = get();
    let out = f();
    (out, get().wrapping_sub(before))
}
