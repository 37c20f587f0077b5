//! Random-forest regression with impurity importance.
//!
//! Trees are depth-unlimited CART on bootstrap samples with minimum leaf size
//! one. Importance of a feature in a tree is the weighted variance reduction
//! of its splits, normalized to sum to one; the forest averages trees that
//! split at least once and renormalizes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::tensor::init::derive_seed;

pub const ESTIMATOR_RANGE: (usize, usize) = (500, 5000);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_features: usize,
}

impl ForestParams {
    /// Estimators from [`ESTIMATOR_RANGE`], max features from `[1, n−1]`.
    pub fn draw<R: Rng>(rng: &mut R, n_features: usize) -> Self {
        Self {
            n_estimators: rng.random_range(ESTIMATOR_RANGE.0..=ESTIMATOR_RANGE.1),
            max_features: rng.random_range(1..=n_features.saturating_sub(1).max(1)),
        }
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    max_features: usize,
    total: f64,
    importance: Vec<f64>,
    pairs: Vec<(f64, f64)>,
}

impl Builder<'_> {
    fn sse(&self, idx: &[usize]) -> f64 {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n;
        idx.iter().map(|&i| (self.y[i] - mean).powi(2)).sum()
    }

    /// Grow below a node holding `idx`; returns the number of splits.
    fn grow<R: Rng>(&mut self, idx: &mut [usize], rng: &mut R) -> usize {
        if idx.len() < 2 {
            return 0;
        }
        let parent = self.sse(idx);
        if parent <= 0.0 {
            return 0;
        }
        let nf = self.x[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in sample(rng, nf, self.max_features.min(nf)).into_iter() {
            self.pairs.clear();
            self.pairs.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            self.pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let n = self.pairs.len();
            let (sum, sq): (f64, f64) = self.pairs.iter().fold((0.0, 0.0), |a, p| (a.0 + p.1, a.1 + p.1 * p.1));
            let (mut ls, mut lq) = (0.0, 0.0);
            for k in 1..n {
                let v = self.pairs[k - 1].1;
                ls += v;
                lq += v * v;
                if self.pairs[k].0 <= self.pairs[k - 1].0 {
                    continue;
                }
                let (nl, nr) = (k as f64, (n - k) as f64);
                let (rs, rq) = (sum - ls, sq - lq);
                let child = (lq - ls * ls / nl) + (rq - rs * rs / nr);
                if best.is_none_or(|b| child < b.0) {
                    best = Some((child, f, 0.5 * (self.pairs[k - 1].0 + self.pairs[k].0)));
                }
            }
        }
        let Some((child, f, threshold)) = best else {
            return 0;
        };
        self.importance[f] += (parent - child.max(0.0)) / self.total;
        let mut split = 0;
        for k in 0..idx.len() {
            if self.x[idx[k]][f] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        1 + self.grow(l, rng) + self.grow(r, rng)
    }
}

fn validate(x: &[Vec<f64>], y: &[f64]) -> Result<usize, AnalysisError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(AnalysisError::Input(format!("{} rows vs {} targets", x.len(), y.len())));
    }
    let nf = x[0].len();
    if nf == 0 || x.iter().any(|r| r.len() != nf) {
        return Err(AnalysisError::Input("ragged or empty feature rows".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::Input("missing or non-finite values".into()));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(AnalysisError::Input("constant target: importance is undefined".into()));
    }
    Ok(nf)
}

/// Normalized importances of one forest.
pub fn forest_importances(x: &[Vec<f64>], y: &[f64], params: ForestParams, seed: u64) -> Result<Vec<f64>, AnalysisError> {
    let nf = validate(x, y)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; nf];
    let mut idx = vec![0usize; n];
    let mut b = Builder {
        x,
        y,
        max_features: params.max_features.max(1),
        total: 1.0,
        importance: vec![0.0; nf],
        pairs: Vec::with_capacity(n),
    };
    for _ in 0..params.n_estimators {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        b.total = n as f64;
        b.importance.iter_mut().for_each(|v| *v = 0.0);
        if b.grow(&mut idx, &mut rng) == 0 {
            continue;
        }
        let s: f64 = b.importance.iter().sum();
        if s > 0.0 {
            for (a, v) in acc.iter_mut().zip(&b.importance) {
                *a += v / s;
            }
        }
    }
    let s: f64 = acc.iter().sum();
    if s <= 0.0 {
        return Ok(vec![1.0 / nf as f64; nf]);
    }
    Ok(acc.into_iter().map(|v| v / s).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub runs: Vec<(ForestParams, Vec<f64>)>,
}

/// Mean importance over `runs` forests with randomly drawn hyperparameters.
pub fn forest_importance(
    features: &[String],
    x: &[Vec<f64>],
    y: &[f64],
    runs: usize,
    seed: u64,
) -> Result<ImportanceReport, AnalysisError> {
    let nf = validate(x, y)?;
    let mut out = Vec::with_capacity(runs);
    let mut mean = vec![0.0; nf];
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let params = ForestParams::draw(&mut rng, nf);
        let imp = forest_importances(x, y, params, rng.random())?;
        for (m, v) in mean.iter_mut().zip(&imp) {
            *m += v / runs as f64;
        }
        out.push((params, imp));
    }
    Ok(ImportanceReport {
        features: features.to_vec(),
        mean,
        runs: out,
    })
}
