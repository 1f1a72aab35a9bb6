//! Virtual time.
//!
//! All scheduling in this crate runs on a `u64` nanosecond timeline rather
//! than on wall-clock types. The simulator advances the timeline explicitly,
//! and the live CLI maps `Instant::elapsed()` onto it, so the same session
//! and schedule code serves both without conversion at every call site.

use std::fmt;
use std::ops::{Add, Sub};

/// A point on the virtual timeline, in nanoseconds from an arbitrary origin.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub u64);

pub const NANOS_PER_MILLI: u64 = 1_000_000;
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_millis(ms: u64) -> Timestamp {
        Timestamp(ms * NANOS_PER_MILLI)
    }

    pub fn from_secs(s: u64) -> Timestamp {
        Timestamp(s * NANOS_PER_SEC)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    /// Saturating distance to an earlier timestamp.
    pub fn since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for Timestamp {
    type Output = Timestamp;

    fn add(self, nanos: u64) -> Timestamp {
        Timestamp(self.0 + nanos)
    }
}

impl Sub<u64> for Timestamp {
    type Output = Timestamp;

    fn sub(self, nanos: u64) -> Timestamp {
        Timestamp(self.0 - nanos)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Seconds with fixed nanosecond precision reads better in event logs
        // than a raw nanosecond integer.
        write!(f, "{}.{:09}s", self.0 / NANOS_PER_SEC, self.0 % NANOS_PER_SEC)
    }
}
