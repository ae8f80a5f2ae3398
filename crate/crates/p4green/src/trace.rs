//! Time-of-day series: per-server energy availability traces and the
//! client traffic rate profile. Both are step-interpolated over a 24-hour
//! day that is compressed onto a configurable span of simulated time.

use crate::time::SimTime;

/// Maps simulated time onto a compressed 24-hour day.
#[derive(Debug, Clone, Copy)]
pub struct DayClock {
    day_nanos: u64,
}

impl DayClock {
    pub fn new(day_seconds: f64) -> DayClock {
        assert!(day_seconds > 0.0);
        DayClock {
            day_nanos: (day_seconds * 1e9).round() as u64,
        }
    }

    pub fn day_nanos(&self) -> u64 {
        self.day_nanos
    }

    /// Hour-of-day in [0, 24) for a simulated instant.
    pub fn hour_of(&self, t: SimTime) -> f64 {
        (t.as_nanos() % self.day_nanos) as f64 / self.day_nanos as f64 * 24.0
    }

    /// Simulated instant of `hour` on day `day`.
    pub fn time_at(&self, day: u64, hour: f64) -> SimTime {
        SimTime(day * self.day_nanos + (hour / 24.0 * self.day_nanos as f64).round() as u64)
    }
}

/// Step-interpolated availability index over the day. Before the first
/// sample the index is zero, matching the register initialization.
#[derive(Debug, Clone)]
pub struct EnergyTrace {
    samples: Vec<(f64, u8)>,
}

impl EnergyTrace {
    /// Sample hours must be ascending within [0, 24); the scenario loader
    /// enforces that before construction.
    pub fn new(samples: Vec<(f64, u8)>) -> EnergyTrace {
        debug_assert!(samples.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(samples.iter().all(|s| (0.0..24.0).contains(&s.0)));
        EnergyTrace { samples }
    }

    pub fn value_at(&self, hour: f64) -> u8 {
        self.samples
            .iter()
            .take_while(|(h, _)| *h <= hour)
            .last()
            .map_or(0, |&(_, v)| v)
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|&(h, _)| h)
    }
}

/// Step-interpolated flow arrival rate (new flows per simulated second)
/// over the day.
#[derive(Debug, Clone)]
pub struct RateProfile {
    samples: Vec<(f64, f64)>,
}

impl RateProfile {
    pub fn new(samples: Vec<(f64, f64)>) -> RateProfile {
        debug_assert!(samples.windows(2).all(|w| w[0].0 < w[1].0));
        debug_assert!(samples
            .iter()
            .all(|s| (0.0..24.0).contains(&s.0) && s.1 >= 0.0));
        RateProfile { samples }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty() || self.samples.iter().all(|&(_, r)| r == 0.0)
    }

    pub fn rate_at(&self, hour: f64) -> f64 {
        self.samples
            .iter()
            .take_while(|(h, _)| *h <= hour)
            .last()
            .map_or(0.0, |&(_, r)| r)
    }

    /// First hour at or after `hour` where the step value changes; used to
    /// wake an idle generator when the rate becomes positive again.
    pub fn next_breakpoint_after(&self, hour: f64) -> Option<f64> {
        self.samples.iter().map(|&(h, _)| h).find(|&h| h > hour)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_clock_maps_hours() {
        let clock = DayClock::new(240.0); // 10 s per hour
        assert_eq!(clock.time_at(0, 5.0), SimTime(50_000_000_000));
        assert!((clock.hour_of(SimTime(50_000_000_000)) - 5.0).abs() < 1e-9);
        // Wraps into the second day.
        assert!((clock.hour_of(SimTime(250_000_000_000)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trace_steps_and_defaults_to_zero() {
        let t = EnergyTrace::new(vec![(5.0, 40), (13.0, 0)]);
        assert_eq!(t.value_at(0.0), 0);
        assert_eq!(t.value_at(4.999), 0);
        assert_eq!(t.value_at(5.0), 40);
        assert_eq!(t.value_at(12.9), 40);
        assert_eq!(t.value_at(13.0), 0);
    }

    #[test]
    fn rate_profile_steps() {
        let p = RateProfile::new(vec![(0.0, 1.0), (6.0, 4.0), (20.0, 0.5)]);
        assert_eq!(p.rate_at(0.0), 1.0);
        assert_eq!(p.rate_at(5.9), 1.0);
        assert_eq!(p.rate_at(6.0), 4.0);
        assert_eq!(p.rate_at(23.0), 0.5);
        assert_eq!(p.next_breakpoint_after(6.0), Some(20.0));
        assert_eq!(p.next_breakpoint_after(21.0), None);
    }
}
