//! Time source abstraction.
//!
//! The scan client sleeps through stage moves and settle windows, and the
//! simulated instrument computes motion and vibration decay from elapsed
//! time. Both sides take the same [`Clock`] so tests can substitute a
//! virtual clock: sleeps then advance time exactly, which makes vibration
//! amplitudes, and therefore rendered frames, bit-reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

pub trait Clock: Send + Sync {
    /// Seconds since the clock's origin.
    fn now(&self) -> f64;
    /// Blocks (or virtually advances) for `dur_s` seconds.
    fn sleep(&self, dur_s: f64);
}

/// Real time. Sleeps block the calling thread.
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn sleep(&self, dur_s: f64) {
        if dur_s > 0.0 {
            std::thread::sleep(std::time::Duration::from_secs_f64(dur_s));
        }
    }
}

/// Simulated time: `sleep` advances `now` by exactly the requested amount
/// and returns immediately. One logical timeline shared by everything that
/// holds the clone.
pub struct VirtualClock {
    now_bits: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock {
            now_bits: AtomicU64::new(0f64.to_bits()),
        }
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.now_bits.load(Ordering::SeqCst))
    }

    fn sleep(&self, dur_s: f64) {
        if dur_s <= 0.0 {
            return;
        }
        // CAS loop: concurrent sleepers each advance the shared timeline.
        loop {
            let cur = self.now_bits.load(Ordering::SeqCst);
            let next = (f64::from_bits(cur) + dur_s).to_bits();
            if self
                .now_bits
                .compare_exchange(cur, next, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                return;
            }
        }
    }
}

/// Shorthand for the shared handle type.
pub type SharedClock = Arc<dyn Clock>;
