use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};

/// Source of wall-clock time for traces, metrics and latency measurement.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: every reading advances by a fixed step.
///
/// Used for reproducible suite runs where latency figures must not vary.
#[derive(Debug)]
pub struct StepClock {
    micros: AtomicI64,
    step_micros: i64,
}

impl StepClock {
    pub fn new(start: DateTime<Utc>, step_micros: i64) -> Self {
        Self {
            micros: AtomicI64::new(start.timestamp_micros()),
            step_micros,
        }
    }

    pub fn starting_at_epoch(step_micros: i64) -> Self {
        Self::new(Utc.timestamp_opt(1_700_000_000, 0).unwrap(), step_micros)
    }
}

impl Clock for StepClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.micros.fetch_add(self.step_micros, Ordering::SeqCst);
        DateTime::from_timestamp_micros(t).expect("step clock in range")
    }
}

pub fn millis_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_microseconds().unwrap_or(i64::MAX) as f64 / 1000.0
}
