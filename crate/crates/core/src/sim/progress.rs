//! Lap progress, checkpoints and wrong-direction events.

use serde::{Deserialize, Serialize};

pub const CHECKPOINTS: u32 = 8;

/// Default regression needed before a wrong-direction event fires, as a
/// fraction of the lap.
pub const HYSTERESIS: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Heading {
    Forward,
    Reversed,
}

/// Tracks unwrapped lap progress from successive centerline projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapTracker {
    track_length: f64,
    start_s: f64,
    last_s: f64,
    /// Signed progress in laps since the start.
    pub progress: f64,
    /// Bit `k-1` set once checkpoint `k` (at `k/8` of the lap) was reached
    /// with all earlier ones; bit 7 marks the finish.
    pub checkpoints: u32,
    pub wrong_way_events: u32,
    hysteresis: f64,
    mode: Heading,
    extreme: f64,
}

impl LapTracker {
    pub fn new(track_length: f64, start_s: f64) -> Self {
        Self::with_hysteresis(track_length, start_s, HYSTERESIS)
    }

    pub fn with_hysteresis(track_length: f64, start_s: f64, hysteresis: f64) -> Self {
        Self {
            track_length,
            start_s,
            last_s: start_s,
            progress: 0.0,
            checkpoints: 0,
            wrong_way_events: 0,
            hysteresis,
            mode: Heading::Forward,
            extreme: 0.0,
        }
    }

    /// Feed the arc-length position of the latest tick.
    pub fn update(&mut self, s: f64) {
        let l = self.track_length;
        let mut ds = (s - self.last_s).rem_euclid(l);
        if ds > l / 2.0 {
            ds -= l;
        }
        self.last_s = s;
        self.progress += ds / l;
        let p = self.progress;

        loop {
            let next = self.checkpoints.trailing_ones();
            if next >= CHECKPOINTS || p < (next + 1) as f64 / CHECKPOINTS as f64 {
                break;
            }
            self.checkpoints |= 1 << next;
        }

        match self.mode {
            Heading::Forward => {
                if p > self.extreme {
                    self.extreme = p;
                } else if p < self.extreme - self.hysteresis {
                    self.wrong_way_events += 1;
                    self.mode = Heading::Reversed;
                    self.extreme = p;
                }
            }
            Heading::Reversed => {
                if p < self.extreme {
                    self.extreme = p;
                } else if p > self.extreme + self.hysteresis {
                    self.mode = Heading::Forward;
                    self.extreme = p;
                }
            }
        }
    }

    pub fn lap_complete(&self) -> bool {
        self.checkpoints.trailing_ones() >= CHECKPOINTS
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }
}
