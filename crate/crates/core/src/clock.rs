use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Source of timestamps and durations. `Frozen` reports zero everywhere so
/// that records and outputs are byte-stable across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Frozen,
}

impl Clock {
    /// Milliseconds since the Unix epoch.
    pub fn now_ms(self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            Clock::Frozen => 0,
        }
    }

    pub fn stopwatch(self) -> Stopwatch {
        Stopwatch { clock: self, started: Instant::now() }
    }
}

#[derive(Debug)]
pub struct Stopwatch {
    clock: Clock,
    started: Instant,
}

impl Stopwatch {
    pub fn elapsed_ms(&self) -> u64 {
        match self.clock {
            Clock::System => self.started.elapsed().as_millis() as u64,
            Clock::Frozen => 0,
        }
    }
}
