//! File formats, configuration, training pipelines, experiments and the
//! command-line front end around `motionstream-core`.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod formats;
pub mod models;
pub mod pipeline;
pub mod runs;

use std::time::Instant;

use motionstream_core::streaming::Clock;

/// Milliseconds since construction, from the monotonic clock.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1000.0
    }
}
