//! Process-wide execution settings.
//!
//! Every reduction in this crate has a fixed order, so results are identical
//! with or without worker threads. Deterministic mode additionally forces
//! serial execution.

use std::sync::atomic::{AtomicBool, Ordering};

static SERIAL: AtomicBool = AtomicBool::new(false);

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "CHANSR_THREADS";

pub fn set_deterministic(on: bool) {
    SERIAL.store(on, Ordering::SeqCst);
}

pub fn is_serial() -> bool {
    SERIAL.load(Ordering::Relaxed)
}

/// Sizes the global worker pool from `CHANSR_THREADS`, if set.
/// Has no effect once the pool has been started.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}
