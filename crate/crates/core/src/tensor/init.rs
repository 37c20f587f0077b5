use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Standard deviation of a unit normal truncated to ±2σ.
const TRUNCATED_STD_CORRECTION: f64 = 0.879_625_661_034_239_8;

/// Weight initializer kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Init {
    /// `U(−√(3/fan_in), √(3/fan_in))`, variance `1/fan_in`.
    UniformVarianceScaling,
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncatedNormal { stddev: f64 },
    /// Truncated normal whose post-truncation variance is `2/fan_in`.
    TruncatedNormalScaled,
    Zeros,
    Ones,
}

impl Init {
    pub const FULLY_CONNECTED: Init = Init::TruncatedNormal { stddev: 0.1 };
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Init::UniformVarianceScaling => write!(f, "uniform-variance-scaling"),
            Init::TruncatedNormal { stddev } => write!(f, "truncated-normal(σ={stddev})"),
            Init::TruncatedNormalScaled => write!(f, "truncated-normal-scaled"),
            Init::Zeros => write!(f, "zeros"),
            Init::Ones => write!(f, "ones"),
        }
    }
}

impl FromStr for Init {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-variance-scaling" => Ok(Init::UniformVarianceScaling),
            "truncated-normal" => Ok(Init::FULLY_CONNECTED),
            "truncated-normal-scaled" => Ok(Init::TruncatedNormalScaled),
            "zeros" => Ok(Init::Zeros),
            "ones" => Ok(Init::Ones),
            other => Err(TensorError::Config(format!("unknown initializer kind `{other}`"))),
        }
    }
}

/// Mixes a base seed with a stream index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn truncated_normal(rng: &mut impl Rng, stddev: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * stddev;
        }
    }
}

/// Draws a weight tensor of `shape` for a layer with the given fan-in.
/// Deterministic in `seed`.
pub fn init_weights(init: Init, shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(TensorError::Config("initializer fan-in must be positive".into()));
    }
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = match init {
        Init::UniformVarianceScaling => {
            let limit = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        }
        Init::TruncatedNormal { stddev } => {
            if !(stddev > 0.0 && stddev.is_finite()) {
                return Err(TensorError::Config(format!("invalid truncated-normal stddev {stddev}")));
            }
            (0..n).map(|_| truncated_normal(&mut rng, stddev)).collect()
        }
        Init::TruncatedNormalScaled => {
            let stddev = (2.0 / fan_in as f64).sqrt() / TRUNCATED_STD_CORRECTION;
            (0..n).map(|_| truncated_normal(&mut rng, stddev)).collect()
        }
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    };
    Tensor::new(shape.to_vec(), data)
}
