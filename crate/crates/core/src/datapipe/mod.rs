//! Recorded driving episodes, their on-disk format, and batch sampling.
//!
//! An episode directory holds `manifest.json` (session metadata),
//! `index.csv` with columns `tick,action,lighting,frame_file,unix_ms`, and
//! one PNG per tick under `frames/`.

pub mod preprocess;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, FrameError};
use crate::sim::drivers::Controller;
use crate::sim::{Action, Lighting, World, WorldConfig, WorldState};
use crate::tensor::init::derive_seed;
use crate::tensor::Tensor;
use crate::zoo::InputClass;
use preprocess::{class_frame, instance_normalize, noise_augment, pad_random_crop, scaled_pad, Example};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("episode {session}: {message}")]
    Episode { session: String, message: String },
    #[error("{0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub tick: u64,
    pub action: Action,
    pub lighting: Lighting,
    pub unix_ms: u64,
    pub frame: Frame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub session_id: String,
    /// `human`, `model` or `scripted`.
    pub driver: String,
    pub world_config_hash: String,
    pub world: WorldConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub records: Vec<FrameRecord>,
}

/// FNV-1a of the config's JSON form.
pub fn config_hash(config: &WorldConfig) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in serde_json::to_string(config).expect("config serializes").bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub const INDEX_HEADER: &str = "tick,action,lighting,frame_file,unix_ms";

impl Episode {
    pub fn new(session_id: impl Into<String>, driver: impl Into<String>, world: &WorldConfig) -> Self {
        Self {
            meta: EpisodeMeta {
                session_id: session_id.into(),
                driver: driver.into(),
                world_config_hash: config_hash(world),
                world: world.clone(),
            },
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ticks strictly increasing and gap-free.
    pub fn validate(&self) -> Result<(), DataError> {
        for w in self.records.windows(2) {
            if w[1].tick != w[0].tick + 1 {
                return Err(DataError::Episode {
                    session: self.meta.session_id.clone(),
                    message: format!("tick {} followed by {}", w[0].tick, w[1].tick),
                });
            }
        }
        Ok(())
    }

    pub fn index_csv(&self) -> String {
        let mut out = String::from(INDEX_HEADER);
        out.push('\n');
        for r in &self.records {
            out += &format!("{},{},{},{},{}\n", r.tick, r.action, r.lighting, frame_file(r.tick), r.unix_ms);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        self.validate()?;
        let frames = dir.join("frames");
        fs::create_dir_all(&frames).map_err(io_err(&frames))?;
        for r in &self.records {
            let p = dir.join(frame_file(r.tick));
            fs::write(&p, r.frame.to_png()?).map_err(io_err(&p))?;
        }
        let p = dir.join("index.csv");
        fs::write(&p, self.index_csv()).map_err(io_err(&p))?;
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&self.meta)?).map_err(io_err(&p))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let p = dir.join("manifest.json");
        let meta: EpisodeMeta = serde_json::from_str(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
        let p = dir.join("index.csv");
        let index = fs::read_to_string(&p).map_err(io_err(&p))?;
        let bad = |message: String| DataError::Episode {
            session: meta.session_id.clone(),
            message,
        };
        let mut lines = index.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(bad("index.csv header mismatch".into()));
        }
        let mut records = Vec::new();
        for (n, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("index row {}: {} fields", n + 1, f.len())));
            }
            let tick = f[0].parse().map_err(|e| bad(format!("row {}: {e}", n + 1)))?;
            let fp = dir.join(f[3]);
            let frame = Frame::from_png(&fs::read(&fp).map_err(io_err(&fp))?)?;
            records.push(FrameRecord {
                tick,
                action: f[1].parse().map_err(bad)?,
                lighting: f[2].parse().map_err(bad)?,
                unix_ms: f[4].parse().map_err(|e| bad(format!("row {}: {e}", n + 1)))?,
                frame,
            });
        }
        let ep = Episode { meta, records };
        ep.validate()?;
        Ok(ep)
    }
}

pub fn frame_file(tick: u64) -> String {
    format!("frames/{tick:06}.png")
}

/// Drive `world` with `controller` for `ticks` control ticks, recording the
/// rendered frame and the action chosen from it. Timestamps are synthetic:
/// `start_ms + tick·1000/fps`.
pub fn record_episode(
    world: &World,
    controller: &mut dyn Controller,
    ticks: usize,
    session_id: &str,
    driver: &str,
    start_ms: u64,
) -> Episode {
    record_from(world, world.start_state(), controller, ticks, session_id, driver, start_ms)
}

/// [`record_episode`] from an arbitrary initial state.
pub fn record_from(
    world: &World,
    mut state: WorldState,
    controller: &mut dyn Controller,
    ticks: usize,
    session_id: &str,
    driver: &str,
    start_ms: u64,
) -> Episode {
    let mut ep = Episode::new(session_id, driver, &world.config);
    let dt = world.config.dt();
    for _ in 0..ticks {
        let frame = world.render(&state);
        let action = controller.act(world, &state);
        ep.records.push(FrameRecord {
            tick: state.tick,
            action,
            lighting: world.config.lighting,
            unix_ms: start_ms + state.tick * 1000 / world.config.fps as u64,
            frame,
        });
        state = world.step(&state, action, dt);
    }
    ep
}

/// Proportions of the four labels over every labeled record.
pub fn label_distribution<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Result<[f64; 4], DataError> {
    let mut counts = [0usize; 4];
    for ep in episodes {
        for r in &ep.records {
            if let Some(l) = r.action.label() {
                counts[l] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(DataError::Dataset("no labeled frames".into()));
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sessions: Vec<SessionEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(io_err(path))?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Episode>,
    pub validation: Vec<Episode>,
}

impl DatasetSplit {
    pub fn new(train: Vec<Episode>, validation: Vec<Episode>) -> Result<Self, DataError> {
        let ids: HashSet<&str> = train.iter().map(|e| e.meta.session_id.as_str()).collect();
        if let Some(e) = validation.iter().find(|e| ids.contains(e.meta.session_id.as_str())) {
            return Err(DataError::Dataset(format!(
                "session {} is in both training and validation",
                e.meta.session_id
            )));
        }
        for e in train.iter().chain(&validation) {
            e.validate()?;
        }
        Ok(Self { train, validation })
    }

    /// Load every session of a manifest; relative paths resolve against the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let m = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        for s in &m.sessions {
            let ep = Episode::load(&base.join(&s.path))?;
            match s.split {
                Split::Train => train.push(ep),
                Split::Validation => validation.push(ep),
            }
        }
        Self::new(train, validation)
    }
}

/// Sampling and augmentation settings for one input class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub class: InputClass,
    pub lags: (usize, usize),
    pub batch_size: usize,
    /// Per-side pad; `None` scales 30 px at width 320 to the frame width.
    pub pad: Option<usize>,
    pub noise: bool,
    pub target_psnr: f64,
}

impl PipelineConfig {
    pub fn new(class: InputClass) -> Self {
        Self {
            class,
            lags: preprocess::DEFAULT_LAGS,
            batch_size: 32,
            pad: None,
            noise: true,
            target_psnr: preprocess::TARGET_PSNR,
        }
    }

    pub fn max_lag(&self) -> usize {
        match self.class {
            InputClass::Framestack => self.lags.0.max(self.lags.1),
            _ => 0,
        }
    }
}

/// Record indices usable as examples: labeled, with full lag history.
pub fn eligible(ep: &Episode, cfg: &PipelineConfig) -> Vec<usize> {
    (cfg.max_lag()..ep.records.len())
        .filter(|&i| ep.records[i].action.label().is_some())
        .collect()
}

/// Eval-form example for record `i`: crop, class conversion, instance norm.
pub fn example_at(ep: &Episode, i: usize, cfg: &PipelineConfig) -> Result<Example, DataError> {
    Ok(instance_normalize(&view_at(ep, i, cfg)?))
}

/// What the network sees of record `i`, before normalization.
pub fn view_at(ep: &Episode, i: usize, cfg: &PipelineConfig) -> Result<Frame, DataError> {
    let r = &ep.records;
    let lagged = if cfg.class == InputClass::Framestack {
        if i < cfg.max_lag() {
            return Err(DataError::Shape(format!("record {i} lacks lag history")));
        }
        Some((&r[i - cfg.lags.0].frame, &r[i - cfg.lags.1].frame))
    } else {
        None
    };
    class_frame(cfg.class, &r[i].frame, lagged)
}

pub fn examples_to_tensor(examples: &[Example]) -> Result<Tensor, DataError> {
    let first = examples.first().ok_or_else(|| DataError::Dataset("empty example list".into()))?;
    let mut data = Vec::with_capacity(examples.len() * first.data.len());
    for e in examples {
        data.extend_from_slice(&e.data);
    }
    let s = first.shape();
    Tensor::new(vec![examples.len(), s[0], s[1], s[2]], data).map_err(|e| DataError::Shape(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub episode: usize,
    /// Index of the first record of the run.
    pub start: usize,
    pub noise_sigma: Option<f64>,
}

/// Every `(episode, position)` from which `batch_size` consecutive eligible
/// records can be taken; positions index the eligible list.
pub fn valid_starts(episodes: &[Episode], cfg: &PipelineConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let n = eligible(ep, cfg).len();
        if n >= cfg.batch_size {
            out.extend((0..=n - cfg.batch_size).map(|k| (e, k)));
        }
    }
    out
}

/// Draw a uniformly random run of `batch_size` consecutive examples from
/// one episode, preprocess, pad-crop each, and noise-double when enabled.
pub fn sample_batch(episodes: &[Episode], cfg: &PipelineConfig, seed: u64) -> Result<Batch, DataError> {
    let starts = valid_starts(episodes, cfg);
    if starts.is_empty() {
        return Err(DataError::Dataset(format!(
            "no episode has {} usable frames for {}",
            cfg.batch_size, cfg.class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (e, k) = starts[rng.random_range(0..starts.len())];
    let ep = &episodes[e];
    let idx = eligible(ep, cfg);
    let run = &idx[k..k + cfg.batch_size];
    let mut examples = Vec::with_capacity(run.len() * 2);
    let mut labels = Vec::with_capacity(run.len() * 2);
    for (n, &i) in run.iter().enumerate() {
        let ex = example_at(ep, i, cfg)?;
        let pad = cfg.pad.unwrap_or_else(|| scaled_pad(ex.width));
        let mut crop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, n as u64));
        examples.push(pad_random_crop(&ex, pad, &mut crop_rng));
        labels.push(ep.records[i].action.label().expect("eligible records are labeled"));
    }
    let noise_sigma = if cfg.noise {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        let report = noise_augment(&mut examples, cfg.target_psnr, &mut noise_rng);
        labels.extend_from_within(..);
        Some(report.sigma)
    } else {
        None
    };
    Ok(Batch {
        inputs: examples_to_tensor(&examples)?,
        labels,
        episode: e,
        start: run[0],
        noise_sigma,
    })
}

/// Every eligible record of `episodes` in eval form, with labels.
pub fn full_set(episodes: &[Episode], cfg: &PipelineConfig) -> Result<(Vec<Example>, Vec<usize>), DataError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ep in episodes {
        for i in eligible(ep, cfg) {
            xs.push(example_at(ep, i, cfg)?);
            ys.push(ep.records[i].action.label().unwrap());
        }
    }
    Ok((xs, ys))
}
