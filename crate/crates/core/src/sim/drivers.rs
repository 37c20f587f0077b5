//! Scripted controllers: the stand-in for human drivers when recording, and
//! the fixtures that exercise each trial outcome.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geom::wrap_angle;
use super::{Action, World, WorldState};

pub trait Controller {
    fn act(&mut self, world: &World, state: &WorldState) -> Action;

    /// Forget per-trial state before a new trial.
    fn reset(&mut self) {}

    /// A failure behind the last action, if any.
    fn failure(&mut self) -> Option<String> {
        None
    }
}

impl<F: FnMut(&World, &WorldState) -> Action> Controller for F {
    fn act(&mut self, world: &World, state: &WorldState) -> Action {
        self(world, state)
    }
}

/// Always the same action.
pub struct Constant(pub Action);

impl Controller for Constant {
    fn act(&mut self, _: &World, _: &WorldState) -> Action {
        self.0
    }
}

/// Replays a fixed action list, then idles.
pub struct Replay {
    actions: Vec<Action>,
    next: usize,
}

impl Replay {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, next: 0 }
    }
}

impl Controller for Replay {
    fn act(&mut self, _: &World, _: &WorldState) -> Action {
        let a = self.actions.get(self.next).copied().unwrap_or(Action::None);
        self.next += 1;
        a
    }
}

/// Forward for `period` ticks, backward for `period` ticks, repeated.
pub struct Alternator {
    pub period: u64,
}

impl Controller for Alternator {
    fn act(&mut self, _: &World, state: &WorldState) -> Action {
        if (state.tick / self.period) % 2 == 0 {
            Action::Forward
        } else {
            Action::Backward
        }
    }
}

/// Pure-pursuit line follower restricted to pivot-or-forward moves.
///
/// The pursued point sits `lookahead` meters along the centerline, shifted
/// sideways by a smooth seeded wander of up to `wander` meters, so recorded
/// runs visit off-center poses with corrective labels. The wander depends
/// only on the arc-length position, so the label is a function of the pose.
#[derive(Clone, Debug)]
pub struct LineFollower {
    pub lookahead: f64,
    pub tolerance: f64,
    pub wander: f64,
    /// Once pivoting, keep turning until the error falls to this angle.
    /// Equal to `tolerance` for no hysteresis.
    pub release: f64,
    turning: f64,
    /// `(amplitude weight, cycles per lap, phase)`.
    waves: Vec<(f64, f64, f64)>,
    /// `+1` drives the lane forward, `-1` against it.
    pub direction: f64,
}

impl LineFollower {
    pub fn new() -> Self {
        Self {
            lookahead: 0.2,
            tolerance: 6f64.to_radians(),
            wander: 0.0,
            release: 6f64.to_radians(),
            turning: 0.0,
            waves: Vec::new(),
            direction: 1.0,
        }
    }

    pub fn wandering(amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..1.0),
                    rng.random_range(2..7) as f64,
                    rng.random_range(0.0..TAU),
                )
            })
            .collect::<Vec<_>>();
        let norm: f64 = waves.iter().map(|w| w.0).sum();
        Self {
            wander: amplitude,
            waves: waves.into_iter().map(|(a, f, p)| (a / norm, f, p)).collect(),
            ..Self::new()
        }
    }

    /// Lateral offset at lap fraction `u`.
    fn offset(&self, u: f64) -> f64 {
        self.wander * self.waves.iter().map(|(a, k, p)| a * (TAU * k * u + p).sin()).sum::<f64>()
    }

    /// Signed bearing of the pursued point relative to the heading.
    pub fn heading_error(&self, world: &World, state: &WorldState) -> f64 {
        let p = state.pose.pos();
        let (s, _) = world.track.project(p);
        let ahead = s + self.direction * self.lookahead;
        let target = world.track.point_at(ahead).0 + world.track.normal_at(ahead) * self.offset(ahead / world.track.length);
        wrap_angle((target - p).angle() - state.pose.heading)
    }

    /// Memoryless decision: pivot toward the pursued point when it lies
    /// outside the tolerance.
    pub fn steer(&self, world: &World, state: &WorldState) -> Action {
        let err = self.heading_error(world, state);
        if err > self.tolerance {
            Action::LeftPivot
        } else if err < -self.tolerance {
            Action::RightPivot
        } else {
            Action::Forward
        }
    }
}

impl Default for LineFollower {
    fn default() -> Self {
        Self::new()
    }
}

impl Controller for LineFollower {
    fn act(&mut self, world: &World, state: &WorldState) -> Action {
        let err = self.heading_error(world, state);
        if self.turning != 0.0 && err * self.turning > self.release {
            return if self.turning > 0.0 { Action::LeftPivot } else { Action::RightPivot };
        }
        let a = self.steer(world, state);
        self.turning = match a {
            Action::LeftPivot => 1.0,
            Action::RightPivot => -1.0,
            _ => 0.0,
        };
        a
    }

    fn reset(&mut self) {
        self.turning = 0.0;
    }
}

/// Follows the line, turning around after `forward` laps of travel along
/// the lane and again after `back` laps against it.
pub struct Shuttle {
    pub follower: LineFollower,
    pub forward: f64,
    pub back: f64,
    anchor: f64,
}

impl Shuttle {
    pub fn new(forward: f64, back: f64) -> Self {
        Self {
            follower: LineFollower::new(),
            forward,
            back,
            anchor: 0.0,
        }
    }
}

impl Controller for Shuttle {
    fn act(&mut self, world: &World, state: &WorldState) -> Action {
        let p = state.progress();
        let d = self.follower.direction;
        let leg = if d > 0.0 { self.forward } else { self.back };
        if (p - self.anchor) * d >= leg {
            self.follower.direction = -d;
            self.anchor = p;
        }
        self.follower.steer(world, state)
    }

    fn reset(&mut self) {
        self.follower.direction = 1.0;
        self.anchor = 0.0;
    }
}
