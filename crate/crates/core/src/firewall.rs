//! Label firewall.
//!
//! Labels travel with datasets and batches for evaluation, but the training
//! path must never look at them. Every label accessor reports here; reads
//! that happen while a training scope is active on the current thread are
//! counted as violations (and trip a debug assertion).

use std::cell::Cell;

thread_local! {
    static IN_TRAINING: Cell<u32> = const { Cell::new(0) };
    static VIOLATIONS: Cell<u64> = const { Cell::new(0) };
    static READS: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with the training-path flag raised on this thread.
pub fn training_scope<T>(f: impl FnOnce() -> T) -> T {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            IN_TRAINING.with(|c| c.set(c.get() - 1));
        }
    }
    IN_TRAINING.with(|c| c.set(c.get() + 1));
    let _guard = Guard;
    f()
}

pub fn in_training_scope() -> bool {
    IN_TRAINING.with(|c| c.get() > 0)
}

pub(crate) fn record_label_read() {
    READS.with(|c| c.set(c.get() + 1));
    if in_training_scope() {
        VIOLATIONS.with(|c| c.set(c.get() + 1));
        // Counted rather than panicking in release builds so tests can assert on it.
        debug_assert!(false, "label read inside the training path");
    }
}

/// Label reads on this thread that happened inside a training scope.
pub fn violations() -> u64 {
    VIOLATIONS.with(|c| c.get())
}

/// All label reads on this thread.
pub fn label_reads() -> u64 {
    READS.with(|c| c.get())
}

pub fn reset() {
    VIOLATIONS.with(|c| c.set(0));
    READS.with(|c| c.set(0));
}
