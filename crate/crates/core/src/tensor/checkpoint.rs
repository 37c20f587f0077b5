//! Self-describing JSON checkpoints. Tensor payloads are base64 of
//! little-endian `f64` so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::network::RunningStats;
use super::{Network, NetworkSpec, OptimizerState, Result, Tensor, TensorError};

pub const FORMAT: &str = "gaplab-checkpoint/1";

fn encode(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode(s: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("payload of {} bytes is not a whole number of f64", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob(pub Vec<f64>);

impl Serialize for Blob {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Blob {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map(Blob).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub mean: Blob,
    pub var: Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<Blob>,
    pub second_moment: Vec<Blob>,
}

/// Where every random stream of a run came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub init_seed: u64,
    pub run_seed: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: NetworkSpec,
    pub params: Vec<Vec<TensorRecord>>,
    pub running: Vec<Option<StatsRecord>>,
    pub optimizer: Option<OptimizerRecord>,
    pub iteration: u64,
    pub seeds: SeedLineage,
}

impl Checkpoint {
    pub fn capture(net: &Network, optimizer: Option<&OptimizerState>, iteration: u64, seeds: SeedLineage) -> Self {
        Self {
            format: FORMAT.into(),
            spec: net.spec().clone(),
            params: net
                .params()
                .iter()
                .map(|ts| {
                    ts.iter()
                        .map(|t| TensorRecord {
                            shape: t.shape().to_vec(),
                            data: Blob(t.data().to_vec()),
                        })
                        .collect()
                })
                .collect(),
            running: net
                .running_stats()
                .iter()
                .map(|r| {
                    r.as_ref().map(|r| StatsRecord {
                        mean: Blob(r.mean.clone()),
                        var: Blob(r.var.clone()),
                    })
                })
                .collect(),
            optimizer: optimizer.map(|o| {
                let (m, v) = o.moments();
                OptimizerRecord {
                    learning_rate: o.learning_rate,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    epsilon: o.epsilon,
                    step: o.step,
                    first_moment: m.iter().map(|b| Blob(b.clone())).collect(),
                    second_moment: v.iter().map(|b| Blob(b.clone())).collect(),
                }
            }),
            iteration,
            seeds,
        }
    }

    pub fn network(&self) -> Result<Network> {
        let params = self
            .params
            .iter()
            .map(|ts| {
                ts.iter()
                    .map(|r| Tensor::new(r.shape.clone(), r.data.0.clone()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let running = self
            .running
            .iter()
            .map(|r| {
                r.as_ref().map(|r| RunningStats {
                    mean: r.mean.0.clone(),
                    var: r.var.0.clone(),
                })
            })
            .collect();
        Network::from_parts(self.spec.clone(), params, running, self.seeds.init_seed)
    }

    pub fn optimizer(&self) -> Option<OptimizerState> {
        self.optimizer.as_ref().map(|r| {
            let mut o = OptimizerState::new(r.learning_rate);
            o.beta1 = r.beta1;
            o.beta2 = r.beta2;
            o.epsilon = r.epsilon;
            o.step = r.step;
            o.restore_moments(
                r.first_moment.iter().map(|b| b.0.clone()).collect(),
                r.second_moment.iter().map(|b| b.0.clone()).collect(),
            );
            o
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        if c.format != FORMAT {
            return Err(TensorError::Checkpoint(format!("unsupported format `{}`", c.format)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json)
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
