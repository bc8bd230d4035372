use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::event::Timestamp;

/// Source of event timestamps. Injected so replays are bit-identical.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Starts at `start` and advances by `step` on every reading.
#[derive(Debug)]
pub struct FixedClock {
    next: AtomicU64,
    step: u64,
}

impl FixedClock {
    pub const DEFAULT_START: Timestamp = 1_767_225_600_000; // 2026-01-01T00:00:00Z

    pub fn new(start: Timestamp, step: u64) -> Self {
        FixedClock { next: AtomicU64::new(start), step }
    }
}

impl Default for FixedClock {
    fn default() -> Self {
        FixedClock::new(Self::DEFAULT_START, 1000)
    }
}

impl Clock for FixedClock {
    fn now(&self) -> Timestamp {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}
