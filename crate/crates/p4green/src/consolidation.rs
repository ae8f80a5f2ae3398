//! Epoch-based traffic estimation and ECMP width control.
//!
//! Core and access switches keep three registers: the current ECMP width
//! (`aggr_switches`), the start of the running epoch, and a byte counter.
//! Each accounted packet may first rotate the epoch: the accumulated byte
//! count is compared against the configured thresholds, the width register
//! is recomputed, and counting restarts. Width moves both up and down.

use thiserror::Error;

use crate::time::{SimDuration, SimTime};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("clock regression: now {now:?} is before epoch_start {epoch_start:?}")]
pub struct ClockRegression {
    pub now: SimTime,
    pub epoch_start: SimTime,
}

/// One epoch rotation: the byte count that closed the epoch and the width
/// chosen from it. Fed to the width log for later replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rotation {
    pub at: SimTime,
    pub epoch_traffic: u64,
    pub width: usize,
}

/// Per-switch consolidation registers and static thresholds.
#[derive(Debug, Clone)]
pub struct ConsolidationState {
    aggr_switches: usize,
    epoch_start: SimTime,
    traffic: u64,
    epoch_length: SimDuration,
    thresholds: Vec<u64>,
    max_width: usize,
    /// When set, the width register is pinned at `max_width`; epochs still
    /// rotate so traffic logs stay comparable. This is the plain-ECMP
    /// baseline mode.
    pinned: bool,
}

impl ConsolidationState {
    /// Thresholds must be strictly ascending with exactly `max_width - 1`
    /// entries; the scenario loader validates that before we get here.
    pub fn new(epoch_length: SimDuration, thresholds: Vec<u64>, max_width: usize) -> Self {
        debug_assert!(max_width >= 1);
        debug_assert_eq!(thresholds.len(), max_width - 1);
        debug_assert!(thresholds.windows(2).all(|w| w[0] < w[1]));
        ConsolidationState {
            aggr_switches: 1,
            epoch_start: SimTime::ZERO,
            traffic: 0,
            epoch_length,
            thresholds,
            max_width,
            pinned: false,
        }
    }

    pub fn pin_width(&mut self) {
        self.pinned = true;
        self.aggr_switches = self.max_width;
    }

    pub fn width(&self) -> usize {
        self.aggr_switches
    }

    pub fn max_width(&self) -> usize {
        self.max_width
    }

    pub fn traffic(&self) -> u64 {
        self.traffic
    }

    pub fn epoch_start(&self) -> SimTime {
        self.epoch_start
    }

    /// Counts one packet and returns the width to use for it. If the epoch
    /// has elapsed, the epoch is rotated first — width recomputed from the
    /// finished epoch's bytes, counter reset, epoch restarted at `now` —
    /// and the rotation is reported so it can be logged. An idle stretch of
    /// several epochs still produces exactly one rotation: the stale count
    /// is evaluated as-is when the next packet arrives.
    pub fn account(
        &mut self,
        pkt_bytes: u64,
        now: SimTime,
    ) -> Result<(usize, Option<Rotation>), ClockRegression> {
        if now < self.epoch_start {
            return Err(ClockRegression {
                now,
                epoch_start: self.epoch_start,
            });
        }
        let mut rotation = None;
        if now.since(self.epoch_start) >= self.epoch_length {
            let measured = self.traffic;
            if !self.pinned {
                self.aggr_switches = recompute_width(measured, &self.thresholds, self.max_width);
            }
            self.traffic = 0;
            self.epoch_start = now;
            rotation = Some(Rotation {
                at: now,
                epoch_traffic: measured,
                width: self.aggr_switches,
            });
        }
        self.traffic += pkt_bytes;
        Ok((self.aggr_switches, rotation))
    }
}

/// Width from a measured byte count: one switch, plus one per threshold
/// strictly exceeded, capped at the number of physical uplinks.
pub fn recompute_width(traffic: u64, thresholds: &[u64], max_width: usize) -> usize {
    let crossed = thresholds.iter().filter(|&&t| traffic > t).count();
    (1 + crossed).min(max_width)
}
