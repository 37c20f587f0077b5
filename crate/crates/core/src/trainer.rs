//! Supervised training loop with periodic validation and checkpointing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::preprocess::Example;
use crate::datapipe::{examples_to_tensor, full_set, sample_batch, DataError, DatasetSplit, PipelineConfig};
use crate::tensor::checkpoint::SeedLineage;
use crate::tensor::init::derive_seed;
use crate::tensor::network::cross_entropy;
use crate::tensor::{adam_step, Checkpoint, Mode, Network, OptimizerState, TensorError};
use crate::zoo::{self, ArchitectureId, ZooError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error("non-finite training loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("curve does not cover the last {window} of {total} iterations")]
    ShortCurve { window: usize, total: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

const DROPOUT_STREAM: u64 = 0xD0;
const BATCH_STREAM: u64 = 0xBA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchitectureId,
    pub seed: u64,
    pub iterations: usize,
    pub validation_interval: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise: bool,
    pub lags: (usize, usize),
}

impl TrainConfig {
    pub fn new(arch: ArchitectureId, seed: u64) -> Self {
        Self {
            arch,
            seed,
            iterations: 1500,
            validation_interval: 100,
            batch_size: 32,
            learning_rate: 3e-5,
            noise: true,
            lags: crate::datapipe::preprocess::DEFAULT_LAGS,
        }
    }

    /// 6000 iterations of 80-frame batches.
    pub fn full_scale(mut self) -> Self {
        self.iterations = 6000;
        self.batch_size = 80;
        self
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            batch_size: self.batch_size,
            noise: self.noise,
            lags: self.lags,
            ..PipelineConfig::new(self.arch.input_class)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Mean batch loss since the previous point; absent at iteration 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

pub const CURVE_HEADER: &str = "iteration,train_loss,val_loss";

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in curve {
        let t = p.train_loss.map(|v| v.to_string()).unwrap_or_default();
        s += &format!("{},{t},{}\n", p.iteration, p.val_loss);
    }
    s
}

pub fn parse_curve_csv(s: &str) -> Result<Vec<CurvePoint>, String> {
    let mut lines = s.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err("missing curve header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(format!("bad curve row `{l}`"));
            }
            Ok(CurvePoint {
                iteration: f[0].parse().map_err(|e| format!("{e}"))?,
                train_loss: if f[1].is_empty() {
                    None
                } else {
                    Some(f[1].parse().map_err(|e| format!("{e}"))?)
                },
                val_loss: f[2].parse().map_err(|e| format!("{e}"))?,
            })
        })
        .collect()
}

/// Mean validation loss over points with `iteration ≥ total − window`.
pub fn tail_mean_val_loss(curve: &[CurvePoint], total: usize, window: usize) -> Result<f64, TrainError> {
    let covered = curve.iter().any(|p| p.iteration >= total) && curve.iter().any(|p| p.iteration <= total.saturating_sub(window));
    let tail: Vec<f64> = curve
        .iter()
        .filter(|p| p.iteration + window >= total)
        .map(|p| p.val_loss)
        .collect();
    if !covered || tail.is_empty() {
        return Err(TrainError::ShortCurve { window, total });
    }
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Preprocessed validation examples, chunked for inference.
pub struct ValidationSet {
    chunks: Vec<(crate::tensor::Tensor, Vec<usize>)>,
    pub len: usize,
}

impl ValidationSet {
    pub fn new(examples: &[Example], labels: &[usize]) -> Result<Self, TrainError> {
        if examples.is_empty() {
            return Err(TrainError::EmptyValidation);
        }
        let chunks = examples
            .chunks(64)
            .zip(labels.chunks(64))
            .map(|(x, y)| Ok((examples_to_tensor(x)?, y.to_vec())))
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Self {
            chunks,
            len: examples.len(),
        })
    }

    pub fn from_split(split: &DatasetSplit, pipeline: &PipelineConfig) -> Result<Self, TrainError> {
        let (x, y) = full_set(&split.validation, pipeline)?;
        Self::new(&x, &y)
    }
}

/// Eval-mode mean cross-entropy; never mutates `net`.
pub fn validate(net: &Network, set: &ValidationSet) -> Result<f64, TrainError> {
    let width = net.output_width();
    let mut total = 0.0;
    for (x, y) in &set.chunks {
        let p = net.infer(x)?;
        total += cross_entropy(p.data(), y, width)? * y.len() as f64;
    }
    Ok(total / set.len as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub optimizer: OptimizerState,
    pub curve: Vec<CurvePoint>,
    pub best_val_loss: Option<f64>,
    pub best_iteration: Option<usize>,
    pub best: Option<Checkpoint>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::capture(&self.network, Some(&self.optimizer), self.curve.last().map_or(0, |p| p.iteration) as u64, lineage(cfg))
    }
}

fn lineage(cfg: &TrainConfig) -> SeedLineage {
    SeedLineage {
        init_seed: cfg.seed,
        run_seed: cfg.seed,
        notes: vec![
            format!("batch seed for iteration i: derive_seed(derive_seed({}, {BATCH_STREAM}), i)", cfg.seed),
            format!("dropout seed for iteration i: derive_seed(derive_seed({}, {DROPOUT_STREAM}), i)", cfg.seed),
        ],
    }
}

/// Frame geometry the network sees after cropping.
pub fn input_hw(split: &DatasetSplit) -> Result<(usize, usize), TrainError> {
    let f = split
        .train
        .iter()
        .chain(&split.validation)
        .flat_map(|e| e.records.first())
        .next()
        .ok_or_else(|| DataError::Dataset("dataset has no frames".into()))?;
    let h = f.frame.height - crate::datapipe::preprocess::crop_rows(f.frame.height);
    Ok((h, f.frame.width))
}

/// Train from a fresh initialization. `on_point` sees every curve point as
/// it is produced.
pub fn train(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome, TrainError> {
    let (h, w) = input_hw(split)?;
    let spec = zoo::build(&cfg.arch, h, w)?;
    let mut net = Network::new(spec, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.learning_rate);
    let pipeline = cfg.pipeline();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            network: net,
            optimizer: opt,
            curve,
            best_val_loss: None,
            best_iteration: None,
            best: None,
        });
    }
    let val = ValidationSet::from_split(split, &pipeline)?;
    let mut record = |it: usize, train_loss: Option<f64>, net: &Network, opt: &OptimizerState| -> Result<(), TrainError> {
        let v = validate(net, &val)?;
        let p = CurvePoint {
            iteration: it,
            train_loss,
            val_loss: v,
        };
        on_point(&p);
        curve.push(p);
        if best.as_ref().is_none_or(|b| v < b.0) {
            best = Some((v, it, Checkpoint::capture(net, Some(opt), it as u64, lineage(cfg))));
        }
        Ok(())
    };
    record(0, None, &net, &opt)?;
    let batch_root = derive_seed(cfg.seed, BATCH_STREAM);
    let dropout_root = derive_seed(cfg.seed, DROPOUT_STREAM);
    let mut window = Vec::with_capacity(cfg.validation_interval);
    for it in 1..=cfg.iterations {
        let batch = sample_batch(&split.train, &pipeline, derive_seed(batch_root, it as u64))?;
        net.set_dropout_seed(derive_seed(dropout_root, it as u64));
        net.forward(&batch.inputs, Mode::Train)?;
        let loss = net.backward_cross_entropy(&batch.labels)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: it });
        }
        adam_step(&mut opt, &mut net.trainable_mut())?;
        window.push(loss);
        if it % cfg.validation_interval == 0 || it == cfg.iterations {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            record(it, Some(mean), &net, &opt)?;
        }
    }
    let (best_val_loss, best_iteration, best) = match best {
        Some((v, i, c)) => (Some(v), Some(i), Some(c)),
        None => (None, None, None),
    };
    Ok(TrainOutcome {
        network: net,
        optimizer: opt,
        curve,
        best_val_loss,
        best_iteration,
        best,
    })
}

/// `runs/<arch>-<input>/<seed>/` under `root`.
pub fn run_dir(root: &Path, arch: &ArchitectureId, seed: u64) -> PathBuf {
    root.join("runs").join(arch.label()).join(seed.to_string())
}

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const CURVE_FILE: &str = "curve.csv";
pub const RUN_FILE: &str = "run.json";

/// Write the final and best checkpoints, the curve and the run config.
pub fn save_outcome(dir: &Path, cfg: &TrainConfig, out: &TrainOutcome) -> Result<(), TrainError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    out.final_checkpoint(cfg).save(&dir.join(FINAL_CHECKPOINT))?;
    if let Some(b) = &out.best {
        b.save(&dir.join(BEST_CHECKPOINT))?;
    }
    let p = dir.join(CURVE_FILE);
    fs::write(&p, curve_csv(&out.curve)).map_err(io(&p))?;
    let p = dir.join(RUN_FILE);
    fs::write(&p, serde_json::to_string_pretty(cfg).expect("config serializes")).map_err(io(&p))?;
    Ok(())
}

/// One cell of the family × input-class sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub arch: String,
    pub seed: u64,
    pub dir: PathBuf,
}

/// All 21 runs, each seeded from `base_seed` and its cell index.
pub fn sweep(base_seed: u64) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for family in zoo::Family::ALL {
        for class in zoo::InputClass::ALL {
            let seed = derive_seed(base_seed, out.len() as u64);
            out.push(TrainConfig::new(ArchitectureId::new(family, class), seed));
        }
    }
    out
}

pub fn sweep_manifest(root: &Path, runs: &[TrainConfig]) -> Vec<SweepCell> {
    runs.iter()
        .map(|c| SweepCell {
            arch: c.arch.label(),
            seed: c.seed,
            dir: run_dir(root, &c.arch, c.seed),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(iteration: usize, v: f64) -> CurvePoint {
        CurvePoint {
            iteration,
            train_loss: None,
            val_loss: v,
        }
    }

    #[test]
    fn tail_window_counts_thirteen_points() {
        let curve: Vec<_> = (0..=60).map(|k| point(k * 100, k as f64)).collect();
        // entries 48..=60
        let expect = (48..=60).sum::<usize>() as f64 / 13.0;
        assert!((tail_mean_val_loss(&curve, 6000, 1200).unwrap() - expect).abs() < 1e-12);
        let flat: Vec<_> = (0..=60).map(|k| point(k * 100, 0.7)).collect();
        assert!((tail_mean_val_loss(&flat, 6000, 1200).unwrap() - 0.7).abs() < 1e-15);
        assert!(tail_mean_val_loss(&curve[..50], 6000, 1200).is_err());
    }

    #[test]
    fn sweep_covers_every_cell_once() {
        let runs = sweep(7);
        assert_eq!(runs.len(), 21);
        let labels: std::collections::HashSet<_> = runs.iter().map(|c| c.arch.label()).collect();
        assert_eq!(labels.len(), 21);
        assert_eq!(sweep(7), runs);
        let m = sweep_manifest(Path::new("out"), &runs);
        assert!(m[0].dir.starts_with("out/runs"));
    }

    #[test]
    fn curve_csv_round_trip() {
        let c = vec![
            point(0, 1.3862),
            CurvePoint {
                iteration: 100,
                train_loss: Some(1.2),
                val_loss: 1.1,
            },
        ];
        assert_eq!(parse_curve_csv(&curve_csv(&c)).unwrap(), c);
    }
}
