//! Per-frame transforms, in pipeline order: crop, input class, instance
//! normalization, pad + random crop, noise doubling.

use rand::Rng;
use rand_distr::StandardNormal;

use super::DataError;
use crate::frame::Frame;
use crate::tensor::ops::instance_norm_forward;
use crate::zoo::InputClass;

pub const NORM_EPSILON: f64 = 1e-5;
pub const DEFAULT_LAGS: (usize, usize) = (5, 15);
pub const TARGET_PSNR: f64 = 10.0;

/// Rows removed from the top of an `h`-row frame: `⌈h·110/240⌉`.
pub fn crop_rows(h: usize) -> usize {
    (h * 110).div_ceil(240)
}

pub fn crop_top(frame: &Frame) -> Result<Frame, DataError> {
    let cut = crop_rows(frame.height);
    if cut >= frame.height {
        return Err(DataError::Shape(format!("cropping {cut} rows leaves nothing of {}", frame.height)));
    }
    let row = frame.width * frame.channels;
    Ok(Frame {
        width: frame.width,
        height: frame.height - cut,
        channels: frame.channels,
        data: frame.data[cut * row..].to_vec(),
    })
}

/// Luminance with weights 0.299/0.587/0.114, rounded.
pub fn to_gray(frame: &Frame) -> Result<Frame, DataError> {
    if frame.channels != 3 {
        return Err(DataError::Shape(format!("grayscale needs 3 channels, got {}", frame.channels)));
    }
    let data = frame
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round().min(255.0) as u8)
        .collect();
    Frame::new(frame.width, frame.height, 1, data).map_err(|e| DataError::Shape(e.to_string()))
}

/// Interleave three 1-channel frames as `(now, lag1, lag2)`.
pub fn stack_channels(now: &Frame, lag1: &Frame, lag2: &Frame) -> Result<Frame, DataError> {
    for f in [now, lag1, lag2] {
        if f.channels != 1 || f.width != now.width || f.height != now.height {
            return Err(DataError::Shape("framestack inputs must be equal-size gray frames".into()));
        }
    }
    let mut data = Vec::with_capacity(now.data.len() * 3);
    for i in 0..now.data.len() {
        data.extend_from_slice(&[now.data[i], lag1.data[i], lag2.data[i]]);
    }
    Frame::new(now.width, now.height, 3, data).map_err(|e| DataError::Shape(e.to_string()))
}

/// Crop + class conversion of raw RGB frames. `lagged` holds the frames at
/// `t - lag1` and `t - lag2`, required for the framestack class.
pub fn class_frame(class: InputClass, now: &Frame, lagged: Option<(&Frame, &Frame)>) -> Result<Frame, DataError> {
    match class {
        InputClass::Color => crop_top(now),
        InputClass::Gray => to_gray(&crop_top(now)?),
        InputClass::Framestack => {
            let (a, b) = lagged.ok_or_else(|| DataError::Shape("framestack needs lagged frames".into()))?;
            let g = |f: &Frame| to_gray(&crop_top(f)?);
            stack_channels(&g(now)?, &g(a)?, &g(b)?)
        }
    }
}

/// A network-ready example: instance-normalized values plus the channel
/// statistics needed to map back to pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Example {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Pixel-domain values `x/inv_std + mean`.
    pub fn to_pixels(&self) -> Vec<f64> {
        let c = self.channels;
        self.data
            .iter()
            .enumerate()
            .map(|(i, v)| v / self.inv_std[i % c] + self.mean[i % c])
            .collect()
    }

    pub fn from_pixels(&self, pixels: &[f64]) -> Example {
        let c = self.channels;
        Example {
            data: pixels
                .iter()
                .enumerate()
                .map(|(i, p)| (p - self.mean[i % c]) * self.inv_std[i % c])
                .collect(),
            ..self.clone()
        }
    }
}

pub fn instance_normalize(frame: &Frame) -> Example {
    let x: Vec<f64> = frame.data.iter().map(|&b| b as f64).collect();
    let (data, mean, inv_std) = instance_norm_forward(&x, 1, frame.width * frame.height, frame.channels, NORM_EPSILON);
    Example {
        height: frame.height,
        width: frame.width,
        channels: frame.channels,
        data,
        mean,
        inv_std,
    }
}

/// Per-side pad at frame width `w`, scaled from 30 pixels at width 320.
pub fn scaled_pad(width: usize) -> usize {
    (30.0 * width as f64 / 320.0).round() as usize
}

/// Zero-pad by `pad` on every side and take the `h × w` window at offset
/// `(oy, ox)` of the padded image, `0 ≤ oy, ox ≤ 2·pad`.
pub fn pad_crop_at(ex: &Example, pad: usize, oy: usize, ox: usize) -> Example {
    let (h, w, c) = (ex.height, ex.width, ex.channels);
    let mut out = vec![0.0; ex.data.len()];
    for y in 0..h {
        let sy = (y + oy) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + ox) as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&ex.data[src..src + c]);
        }
    }
    Example { data: out, ..ex.clone() }
}

pub fn random_offsets<R: Rng>(rng: &mut R, pad: usize) -> (usize, usize) {
    (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
}

pub fn pad_random_crop<R: Rng>(ex: &Example, pad: usize, rng: &mut R) -> Example {
    let (oy, ox) = random_offsets(rng, pad);
    pad_crop_at(ex, pad, oy, ox)
}

/// `10·log10(max²/mse)`; infinite for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], max: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max * max / mse).log10()
    }
}

fn noisy_pixels(pixels: &[f64], z: &[f64], sigma: f64) -> Vec<f64> {
    pixels
        .iter()
        .zip(z)
        .map(|(p, n)| (p + sigma * n).clamp(0.0, 255.0))
        .collect()
}

/// Result of [`noise_augment`].
#[derive(Clone, Debug)]
pub struct NoiseReport {
    pub sigma: f64,
    pub psnr: Vec<f64>,
}

impl NoiseReport {
    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }
}

/// Append a noisy copy of every example. Noise is Gaussian in pixel space,
/// clipped to `[0, 255]`, and one amplitude shared by the batch is found by
/// bisection so the mean PSNR of the copies hits `target_db`.
pub fn noise_augment<R: Rng>(batch: &mut Vec<Example>, target_db: f64, rng: &mut R) -> NoiseReport {
    let n = batch.len();
    let pixels: Vec<Vec<f64>> = batch.iter().map(Example::to_pixels).collect();
    let draws: Vec<Vec<f64>> = pixels
        .iter()
        .map(|p| (0..p.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mean_psnr = |sigma: f64| -> (f64, Vec<f64>) {
        let v: Vec<f64> = pixels
            .iter()
            .zip(&draws)
            .map(|(p, z)| psnr(p, &noisy_pixels(p, z, sigma), 255.0))
            .collect();
        (v.iter().sum::<f64>() / n as f64, v)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while mean_psnr(hi).0 > target_db && hi < 1e6 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_psnr(mid).0 > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.5 * (lo + hi);
    let (_, per) = mean_psnr(sigma);
    for i in 0..n {
        let noisy = noisy_pixels(&pixels[i], &draws[i], sigma);
        let copy = batch[i].from_pixels(&noisy);
        batch.push(copy);
    }
    NoiseReport { sigma, psnr: per }
}
