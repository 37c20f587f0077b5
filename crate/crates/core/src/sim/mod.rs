//! Deterministic 2D track world with a first-person camera.
//!
//! Coordinates are meters with `y` up; headings are radians counter-clockwise
//! from `+x`. The lane is driven counter-clockwise.

pub mod drivers;
pub mod geom;
pub mod objects;
pub mod progress;
pub mod render;
pub mod track;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geom::{v2, V2};
pub use objects::{place_objects, ObjectPlacement};
pub use progress::LapTracker;
pub use track::{Track, TrackShape};

use geom::{closed_segments, point_in_polygon, wrap_angle, Segment};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    High,
    Low,
}

impl FromStr for Lighting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "high" => Ok(Lighting::High),
            "low" => Ok(Lighting::Low),
            _ => Err(format!("unknown lighting `{s}` (expected high or low)")),
        }
    }
}

impl fmt::Display for Lighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Lighting::High => "high",
            Lighting::Low => "low",
        })
    }
}

/// Discrete controls; the first four are the network's output classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    LeftPivot,
    RightPivot,
    Forward,
    Backward,
    None,
}

impl Action {
    pub const LABELS: [Action; 4] = [Action::LeftPivot, Action::RightPivot, Action::Forward, Action::Backward];

    pub fn label(self) -> Option<usize> {
        Self::LABELS.iter().position(|&a| a == self)
    }

    pub fn from_label(i: usize) -> Action {
        Self::LABELS.get(i).copied().unwrap_or(Action::None)
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::LeftPivot => "left-pivot",
            Action::RightPivot => "right-pivot",
            Action::Forward => "forward",
            Action::Backward => "backward",
            Action::None => "none",
        }
    }

    pub fn translates(self) -> bool {
        matches!(self, Action::Forward | Action::Backward)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [Action::LeftPivot, Action::RightPivot, Action::Forward, Action::Backward, Action::None]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown action `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub track: TrackShape,
    pub width_m: f64,
    pub height_m: f64,
    pub lane_width: f64,
    pub lighting: Lighting,
    /// Luminance multiplier under low lighting.
    pub low_light_factor: f64,
    pub objects: Vec<ObjectPlacement>,
    pub decor_seed: u64,
    pub start_index: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub fps: u32,
    pub fov_deg: f64,
    pub speed: f64,
    pub pivot_rate_deg: f64,
    pub vehicle_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            track: TrackShape::L,
            width_m: 3.56,
            height_m: 2.34,
            lane_width: 0.5,
            lighting: Lighting::High,
            low_light_factor: 0.4,
            objects: Vec::new(),
            decor_seed: 0,
            start_index: 0,
            frame_width: 64,
            frame_height: 48,
            fps: 30,
            fov_deg: 60.0,
            speed: 0.3,
            pivot_rate_deg: 90.0,
            vehicle_radius: 0.08,
        }
    }
}

impl WorldConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.fps as f64
    }

    pub fn light_factor(&self) -> f64 {
        match self.lighting {
            Lighting::High => 1.0,
            Lighting::Low => self.low_light_factor,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn pos(&self) -> V2 {
        v2(self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub pose: Pose,
    pub time: f64,
    pub tick: u64,
    pub collided: bool,
    pub lap: LapTracker,
}

impl WorldState {
    pub fn progress(&self) -> f64 {
        self.lap.progress
    }
}

/// A configured world: immutable geometry shared by stepping and rendering.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub track: Track,
    /// World-frame outline of each placed object, in `config.objects` order.
    pub object_polys: Vec<Vec<V2>>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self, SimError> {
        let c = &config;
        if c.fps == 0 || c.frame_width == 0 || c.frame_height == 0 {
            return Err(SimError::Config("fps and frame size must be positive".into()));
        }
        if c.start_index > 3 {
            return Err(SimError::Config(format!("start index {} outside 0..=3", c.start_index)));
        }
        if c.lane_width <= 2.0 * c.vehicle_radius {
            return Err(SimError::Config(format!(
                "lane width {} does not exceed vehicle width {}",
                c.lane_width,
                2.0 * c.vehicle_radius
            )));
        }
        if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
            return Err(SimError::Config(format!("field of view {}° outside (0, 180)", c.fov_deg)));
        }
        let track = Track::new(c.track, c.width_m, c.height_m, c.lane_width).map_err(SimError::Config)?;
        let mut object_polys = Vec::new();
        for p in &c.objects {
            if !objects::placement_in_bounds(&track, p) {
                return Err(SimError::Config(format!("object {} not fully on the lane", p.object_id)));
            }
            object_polys.push(objects::object_polygon(&track, p));
        }
        Ok(Self {
            config,
            track,
            object_polys,
        })
    }

    pub fn start_state(&self) -> WorldState {
        self.state_at(self.config.start_index)
    }

    pub fn state_at(&self, start_index: usize) -> WorldState {
        self.state_at_arc(self.track.starts[start_index % 4])
    }

    /// Rest on the centerline at arc length `s`, facing along the lane.
    pub fn state_at_arc(&self, s: f64) -> WorldState {
        let s = s.rem_euclid(self.track.length);
        let (p, heading) = self.track.point_at(s);
        WorldState {
            pose: Pose {
                x: p.x,
                y: p.y,
                heading,
            },
            time: 0.0,
            tick: 0,
            collided: false,
            lap: LapTracker::new(self.track.length, s),
        }
    }

    /// Every segment the vehicle can collide with.
    fn obstacles(&self) -> impl Iterator<Item = Segment> + '_ {
        self.track
            .walls
            .iter()
            .copied()
            .chain(self.object_polys.iter().flat_map(|p| closed_segments(p)))
    }

    /// Distance from `p` to the nearest wall or object edge; negative when
    /// inside an object.
    pub fn clearance(&self, p: V2) -> f64 {
        let d = self.obstacles().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min);
        if self.object_polys.iter().any(|poly| point_in_polygon(p, poly)) {
            -d
        } else {
            d
        }
    }

    pub fn collides(&self, p: V2) -> bool {
        self.clearance(p) < self.config.vehicle_radius
    }

    /// Advance by `dt`. Translations stop at the first contact, which sets
    /// the sticky collision flag.
    pub fn step(&self, state: &WorldState, action: Action, dt: f64) -> WorldState {
        let mut next = state.clone();
        next.time += dt;
        next.tick += 1;
        if state.collided {
            return next;
        }
        let c = &self.config;
        let turn = c.pivot_rate_deg.to_radians() * dt;
        match action {
            Action::None => {}
            Action::LeftPivot => next.pose.heading = wrap_angle(state.pose.heading + turn),
            Action::RightPivot => next.pose.heading = wrap_angle(state.pose.heading - turn),
            Action::Forward | Action::Backward => {
                let sign = if action == Action::Forward { 1.0 } else { -1.0 };
                let from = state.pose.pos();
                let delta = V2::from_angle(state.pose.heading) * (sign * c.speed * dt);
                let to = from + delta;
                let end = if self.collides(to) {
                    next.collided = true;
                    // Largest free fraction of the move.
                    let (mut lo, mut hi) = (0.0f64, 1.0f64);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if self.collides(from + delta * mid) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    from + delta * lo
                } else {
                    to
                };
                next.pose.x = end.x;
                next.pose.y = end.y;
            }
        }
        let (s, _) = self.track.project(next.pose.pos());
        next.lap.update(s);
        next
    }

    pub fn render(&self, state: &WorldState) -> crate::frame::Frame {
        render::render(self, state)
    }
}

/// One row of the per-tick trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub action: Action,
    pub progress: f64,
}

pub const TRAJECTORY_HEADER: &str = "time,x,y,heading,action,progress";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        out += &format!("{},{},{},{},{},{}\n", r.time, r.x, r.y, r.heading, r.action, r.progress);
    }
    out
}

pub fn parse_trajectory_csv(s: &str) -> Result<Vec<TrajectoryRow>, String> {
    let mut lines = s.lines();
    if lines.next() != Some(TRAJECTORY_HEADER) {
        return Err("missing trajectory header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(format!("row {}: {} fields", i + 1, f.len()));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1));
            Ok(TrajectoryRow {
                time: num(0)?,
                x: num(1)?,
                y: num(2)?,
                heading: num(3)?,
                action: f[4].parse()?,
                progress: num(5)?,
            })
        })
        .collect()
}
