//! Randomized duty-cycle wake scheduling.
//!
//! Each cycle of length `period` gets one wake instant drawn uniformly within
//! the cycle, independent of every other cycle. Randomizing the offset per
//! cycle keeps two unsynchronized nodes from colliding (or missing each other)
//! the same way forever: for two nodes with equal period T and window a, the
//! chance their windows in a given cycle overlap is 2(a/T) - (a/T)^2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::time::{SimDuration, SimTime};

/// A node's own wake schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct WakeSchedule {
    /// Cycle length; one wake per cycle.
    pub period: SimDuration,
    /// How long the radio stays on after each wake.
    pub active_len: SimDuration,
    /// Start of the cycle the next wake will be drawn from.
    pub cycle_start: SimTime,
}

/// What a node shares about its schedule when it introduces itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub period: SimDuration,
    pub active_len: SimDuration,
}

impl WakeSchedule {
    pub fn new(period: SimDuration, active_len: SimDuration, anchor: SimTime) -> WakeSchedule {
        assert!(!period.is_zero(), "wake period must be positive");
        WakeSchedule {
            period,
            active_len,
            cycle_start: anchor,
        }
    }

    pub fn summary(&self) -> ScheduleSummary {
        ScheduleSummary {
            period: self.period,
            active_len: self.active_len,
        }
    }

    /// Re-anchors the cycle grid at `now`; the next wake is drawn from the
    /// cycle starting here.
    pub fn reanchor(&mut self, now: SimTime) {
        self.cycle_start = now;
    }

    /// Draws the next wake instant: the offset is uniform over the next whole
    /// cycle, and cycles that already lie in the past are skipped. Always
    /// returns a time strictly after `now`.
    pub fn next_wake(&mut self, now: SimTime, rng: &mut impl Rng) -> SimTime {
        loop {
            let offset = SimDuration(rng.gen_range(1..=self.period.0));
            let candidate = self.cycle_start + offset;
            self.cycle_start += self.period;
            if candidate > now {
                return candidate;
            }
        }
    }
}
