//! Injectable time sources.
//!
//! Deadlines, retry backoff and simulated lead times all read time through
//! [`Clock`], so tests can drive the 24-hour review window or the retry
//! schedule without sleeping.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;

    /// Block (or pretend to) for `d`.
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// A clock that only moves when told to. Cloning shares the same instant.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<Mutex<DateTime<Utc>>>,
}

impl VirtualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Arc::new(Mutex::new(start)),
        }
    }

    /// 2025-01-01T00:00:00Z, the epoch every simulation starts from.
    pub fn at_epoch() -> Self {
        Self::new(sim_epoch())
    }

    pub fn advance(&self, d: Duration) {
        let mut now = self.now.lock().expect("virtual clock poisoned");
        *now += chrono::Duration::from_std(d).expect("duration out of range");
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.now.lock().expect("virtual clock poisoned") = t;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().expect("virtual clock poisoned")
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

pub fn sim_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
}
