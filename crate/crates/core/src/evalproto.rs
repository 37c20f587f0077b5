//! Closed-loop trials, the 40-trial campaign, and inference timing.
//!
//! A trial ends on the first of: lap complete, the third wrong-direction
//! event, a collision (or no movement under translation commands for
//! [`Rules::stuck_window_s`]), or forward progress below
//! [`Rules::min_progress`] laps over [`Rules::oscillation_window_s`].

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::preprocess::{class_frame, instance_normalize, DEFAULT_LAGS};
use crate::datapipe::{examples_to_tensor, DataError};
use crate::frame::Frame;
use crate::sim::drivers::Controller;
use crate::sim::geom::wrap_angle;
use crate::sim::{place_objects, trajectory_csv, Action, Lighting, SimError, TrackShape, TrajectoryRow, World, WorldConfig, WorldState};
use crate::tensor::init::derive_seed;
use crate::tensor::{argmax, Network, Tensor, TensorError};
use crate::zoo::InputClass;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("incomplete campaign: {0}")]
    Incomplete(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "lap-complete")]
    LapComplete,
    #[serde(rename = "wrong-direction-x3")]
    WrongDirection,
    #[serde(rename = "collision-stuck")]
    CollisionStuck,
    #[serde(rename = "oscillation-timeout")]
    OscillationTimeout,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::LapComplete,
        Outcome::WrongDirection,
        Outcome::CollisionStuck,
        Outcome::OscillationTimeout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::LapComplete => "lap-complete",
            Outcome::WrongDirection => "wrong-direction-x3",
            Outcome::CollisionStuck => "collision-stuck",
            Outcome::OscillationTimeout => "oscillation-timeout",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Outcome {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown outcome `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rules {
    pub max_wrong_way: u32,
    pub stuck_window_s: f64,
    /// Displacement under which the vehicle counts as not moving, meters.
    pub stuck_epsilon: f64,
    pub oscillation_window_s: f64,
    /// Forward progress, in laps, required per oscillation window.
    pub min_progress: f64,
    /// Start jitter: lateral offset bound in meters, heading bound in degrees.
    pub jitter_m: f64,
    pub jitter_deg: f64,
}

impl Default for Rules {
    fn default() -> Self {
        Self {
            max_wrong_way: 3,
            stuck_window_s: 2.0,
            stuck_epsilon: 1e-3,
            oscillation_window_s: 10.0,
            min_progress: 0.02,
            jitter_m: 0.03,
            jitter_deg: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub arch: String,
    pub input_class: String,
    pub phase: u8,
    pub position: usize,
    pub lighting: Lighting,
    pub seed: u64,
    pub outcome: Outcome,
    pub duration_s: f64,
    pub trajectory: Vec<TrajectoryRow>,
    pub diagnostic: Option<String>,
}

/// Labels copied into every trial result.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialLabels {
    pub arch: String,
    pub input_class: String,
    pub phase: u8,
}

/// Start pose of a trial: the start position shifted by a seeded jitter.
pub fn trial_start(world: &World, position: usize, seed: u64, rules: &Rules) -> WorldState {
    let mut s = world.state_at(position);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lateral = if rules.jitter_m > 0.0 {
        rng.random_range(-rules.jitter_m..=rules.jitter_m)
    } else {
        0.0
    };
    let turn = if rules.jitter_deg > 0.0 {
        rng.random_range(-rules.jitter_deg..=rules.jitter_deg).to_radians()
    } else {
        0.0
    };
    let n = world.track.normal_at(s.lap.start_s());
    s.pose.x += n.x * lateral;
    s.pose.y += n.y * lateral;
    s.pose.heading = wrap_angle(s.pose.heading + turn);
    s
}

/// Run one trial in `world` from start `position`. The controller is reset
/// first; the world's lighting is overridden by `lighting`.
pub fn run_trial(
    world: &World,
    controller: &mut dyn Controller,
    position: usize,
    lighting: Lighting,
    seed: u64,
    rules: &Rules,
    labels: &TrialLabels,
) -> TrialResult {
    let lit;
    let world = if world.config.lighting == lighting {
        world
    } else {
        lit = World {
            config: WorldConfig {
                lighting,
                ..world.config.clone()
            },
            ..world.clone()
        };
        &lit
    };
    controller.reset();
    let dt = world.config.dt();
    let fps = world.config.fps as usize;
    let stuck_ticks = (rules.stuck_window_s * fps as f64).round() as usize;
    let osc_ticks = (rules.oscillation_window_s * fps as f64).round() as usize;
    let mut state = trial_start(world, position, seed, rules);
    let mut rows = vec![row(&state, Action::None)];
    // (position, translated?) per tick, newest last.
    let mut recent: VecDeque<(crate::sim::V2, bool)> = VecDeque::from([(state.pose.pos(), false)]);
    let mut progress_log: VecDeque<f64> = VecDeque::from([state.progress()]);
    let mut diagnostic = None;
    let outcome = loop {
        let action = controller.act(world, &state);
        if let Some(why) = controller.failure() {
            diagnostic = Some(why);
            break Outcome::CollisionStuck;
        }
        state = world.step(&state, action, dt);
        rows.push(row(&state, action));
        if state.collided {
            break Outcome::CollisionStuck;
        }
        if state.lap.lap_complete() {
            break Outcome::LapComplete;
        }
        if state.lap.wrong_way_events >= rules.max_wrong_way {
            break Outcome::WrongDirection;
        }
        recent.push_back((state.pose.pos(), action.translates()));
        if recent.len() > stuck_ticks + 1 {
            recent.pop_front();
        }
        if recent.len() == stuck_ticks + 1 {
            let anchor = recent[0].0;
            let still = recent.iter().all(|(p, _)| (*p - anchor).norm() < rules.stuck_epsilon);
            if still && recent.iter().skip(1).any(|r| r.1) {
                break Outcome::CollisionStuck;
            }
        }
        progress_log.push_back(state.progress());
        if progress_log.len() > osc_ticks + 1 {
            progress_log.pop_front();
        }
        if progress_log.len() == osc_ticks + 1 && progress_log[osc_ticks] - progress_log[0] < rules.min_progress {
            break Outcome::OscillationTimeout;
        }
    };
    TrialResult {
        arch: labels.arch.clone(),
        input_class: labels.input_class.clone(),
        phase: labels.phase,
        position,
        lighting,
        seed,
        outcome,
        duration_s: state.tick as f64 * dt,
        trajectory: rows,
        diagnostic,
    }
}

fn row(s: &WorldState, action: Action) -> TrajectoryRow {
    TrajectoryRow {
        time: s.time,
        x: s.pose.x,
        y: s.pose.y,
        heading: s.pose.heading,
        action,
        progress: s.progress(),
    }
}

/// Drives with a network: render, preprocess for the input class, argmax.
/// Framestack inputs come from a live buffer of past renders; until the
/// buffer is deep enough the oldest render stands in for missing lags.
pub struct NetworkDriver {
    pub network: Network,
    pub class: InputClass,
    pub lags: (usize, usize),
    history: VecDeque<Frame>,
    failure: Option<String>,
}

impl NetworkDriver {
    pub fn new(network: Network, class: InputClass) -> Self {
        Self {
            network,
            class,
            lags: DEFAULT_LAGS,
            history: VecDeque::new(),
            failure: None,
        }
    }

    /// Network input for the newest frame in the buffer.
    pub fn input(&self) -> Result<Tensor, EvalError> {
        let n = self.history.len();
        let now = &self.history[n - 1];
        let lagged = |lag: usize| &self.history[n - 1 - lag.min(n - 1)];
        let stacked = match self.class {
            InputClass::Framestack => Some((lagged(self.lags.0), lagged(self.lags.1))),
            _ => None,
        };
        let ex = instance_normalize(&class_frame(self.class, now, stacked)?);
        Ok(examples_to_tensor(&[ex])?)
    }

    pub fn push_frame(&mut self, frame: Frame) {
        self.history.push_back(frame);
        if self.history.len() > self.lags.0.max(self.lags.1) + 1 {
            self.history.pop_front();
        }
    }

    pub fn decide(&self) -> Result<Action, EvalError> {
        let out = self.network.infer(&self.input()?)?;
        Ok(Action::from_label(argmax(out.data())))
    }
}

impl Controller for NetworkDriver {
    fn act(&mut self, world: &World, state: &WorldState) -> Action {
        self.push_frame(world.render(state));
        match self.decide() {
            Ok(a) => a,
            Err(e) => {
                self.failure = Some(format!("inference failed: {e}"));
                Action::None
            }
        }
    }

    fn reset(&mut self) {
        self.history.clear();
        self.failure = None;
    }

    fn failure(&mut self) -> Option<String> {
        self.failure.take()
    }
}

pub const POSITIONS: usize = 4;
pub const TRIALS_PER_LIGHTING: usize = 5;
pub const CAMPAIGN_TRIALS: usize = POSITIONS * 2 * TRIALS_PER_LIGHTING;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub trials: Vec<TrialResult>,
}

/// Seed of trial `k` (grid order) of a campaign seeded with `seed`.
pub fn trial_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, k as u64)
}

/// Grid order: position-major, five high-light then five low-light trials.
pub fn campaign_grid() -> Vec<(usize, Lighting)> {
    let mut g = Vec::with_capacity(CAMPAIGN_TRIALS);
    for p in 0..POSITIONS {
        for lighting in [Lighting::High, Lighting::Low] {
            g.extend(std::iter::repeat_n((p, lighting), TRIALS_PER_LIGHTING));
        }
    }
    g
}

pub fn run_campaign(
    world: &World,
    controller: &mut dyn Controller,
    seed: u64,
    rules: &Rules,
    labels: &TrialLabels,
) -> Campaign {
    let trials = campaign_grid()
        .into_iter()
        .enumerate()
        .map(|(k, (p, l))| run_trial(world, controller, p, l, trial_seed(seed, k), rules, labels))
        .collect();
    Campaign { trials }
}

impl Campaign {
    /// Every position has five trials under each lighting.
    pub fn check_complete(&self) -> Result<(), EvalError> {
        if self.trials.len() != CAMPAIGN_TRIALS {
            return Err(EvalError::Incomplete(format!(
                "{} trials, expected {CAMPAIGN_TRIALS}",
                self.trials.len()
            )));
        }
        for p in 0..POSITIONS {
            for l in [Lighting::High, Lighting::Low] {
                let n = self.trials.iter().filter(|t| t.position == p && t.lighting == l).count();
                if n != TRIALS_PER_LIGHTING {
                    return Err(EvalError::Incomplete(format!("position {p} {l}: {n} trials")));
                }
            }
        }
        Ok(())
    }

    pub fn completions(&self) -> usize {
        self.trials.iter().filter(|t| t.outcome == Outcome::LapComplete).count()
    }

    pub fn outcome_counts(&self) -> Vec<(Outcome, usize)> {
        Outcome::ALL
            .into_iter()
            .map(|o| (o, self.trials.iter().filter(|t| t.outcome == o).count()))
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(CAMPAIGN_HEADER);
        s.push('\n');
        for (k, t) in self.trials.iter().enumerate() {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                t.arch,
                t.input_class,
                t.phase,
                t.position,
                t.lighting,
                t.outcome,
                t.duration_s,
                trajectory_file(k)
            );
        }
        s
    }

    pub fn summary(&self) -> Result<CampaignSummary, EvalError> {
        let first = self.trials.first().ok_or_else(|| EvalError::Incomplete("no trials".into()))?;
        let laps: Vec<f64> = self
            .trials
            .iter()
            .filter(|t| t.outcome == Outcome::LapComplete)
            .map(|t| t.duration_s)
            .collect();
        Ok(CampaignSummary {
            arch: first.arch.clone(),
            input_class: first.input_class.clone(),
            phase: first.phase,
            trials: self.trials.len(),
            completions: self.completions(),
            success_rate: success_rate(self)?,
            outcomes: self.outcome_counts().into_iter().map(|(o, n)| (o.name().to_string(), n)).collect(),
            mean_lap_time_s: (!laps.is_empty()).then(|| laps.iter().sum::<f64>() / laps.len() as f64),
        })
    }

    /// `campaign.csv`, `summary.json` and one trajectory CSV per trial.
    pub fn save(&self, dir: &Path) -> Result<CampaignSummary, EvalError> {
        let summary = self.summary()?;
        let io = |path: PathBuf| move |source| EvalError::Io { path, source };
        fs::create_dir_all(dir.join("trajectories")).map_err(io(dir.to_path_buf()))?;
        for (k, t) in self.trials.iter().enumerate() {
            let p = dir.join(trajectory_file(k));
            fs::write(&p, trajectory_csv(&t.trajectory)).map_err(io(p.clone()))?;
        }
        let p = dir.join("campaign.csv");
        fs::write(&p, self.csv()).map_err(io(p.clone()))?;
        let p = dir.join("summary.json");
        fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io(p.clone()))?;
        Ok(summary)
    }
}

pub const CAMPAIGN_HEADER: &str = "arch,input_class,phase,position,lighting,outcome,duration_s,trajectory_file";

pub fn trajectory_file(k: usize) -> String {
    format!("trajectories/trial_{k:02}.csv")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub arch: String,
    pub input_class: String,
    pub phase: u8,
    pub trials: usize,
    pub completions: usize,
    pub success_rate: f64,
    pub outcomes: Vec<(String, usize)>,
    pub mean_lap_time_s: Option<f64>,
}

/// Completed laps over the 40 trials of a complete campaign.
pub fn success_rate(c: &Campaign) -> Result<f64, EvalError> {
    c.check_complete()?;
    Ok(c.completions() as f64 / CAMPAIGN_TRIALS as f64)
}

/// The novel-world configuration: oval track, fresh decor, zero to four
/// seeded objects, and speed and pivot rate scaled by up to ±5%.
pub fn phase_two_config(base: &WorldConfig, seed: u64) -> Result<WorldConfig, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut c = WorldConfig {
        track: TrackShape::Oval,
        decor_seed: derive_seed(seed, 0xDEC0),
        objects: Vec::new(),
        ..base.clone()
    };
    c.speed *= 1.0 + rng.random_range(-0.05..=0.05);
    c.pivot_rate_deg *= 1.0 + rng.random_range(-0.05..=0.05);
    let track = World::new(c.clone())?.track;
    c.objects = place_objects(&track, derive_seed(seed, 0x0B1), (0, 4)).map_err(SimError::Config)?;
    World::new(c.clone())?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRate {
    /// Inferences per second of each timed run.
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    pub includes_preprocessing: bool,
}

pub fn rate(inferences: usize, elapsed_s: f64) -> f64 {
    inferences as f64 / elapsed_s
}

/// Time `runs` batches of `per_run` single-frame inferences on `frame`.
/// With `inclusive`, preprocessing of the raw frame is inside the timer.
pub fn inference_rate(
    net: &Network,
    class: InputClass,
    frame: &Frame,
    runs: usize,
    per_run: usize,
    inclusive: bool,
) -> Result<InferenceRate, EvalError> {
    let mut driver = NetworkDriver::new(net.clone(), class);
    driver.push_frame(frame.clone());
    let fixed = driver.input()?;
    let mut per = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        for _ in 0..per_run {
            let x = if inclusive { driver.input()? } else { fixed.clone() };
            std::hint::black_box(net.infer(&x)?);
        }
        per.push(rate(per_run, t0.elapsed().as_secs_f64()));
    }
    Ok(InferenceRate {
        mean: per.iter().sum::<f64>() / per.len() as f64,
        per_run: per,
        frame_width: frame.width,
        frame_height: frame.height,
        includes_preprocessing: inclusive,
    })
}
