//! Post-hoc analyses over trained networks and campaign results.

pub mod forest;
pub mod saliency;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::DataError;
use crate::frame::Frame;
use crate::tensor::TensorError;

pub use forest::{forest_importance, forest_importances, ForestParams, ImportanceReport};
pub use saliency::{flip, pixel_flip_saliency, saliency_batch, Heatmap, Saliency, SaliencySummary};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean squared distance between time-paired points; the longer path is
/// truncated to the shorter.
pub fn path_difference(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::Input("empty trajectory".into()));
    }
    let n = a.len().min(b.len());
    let sum: f64 = a[..n]
        .iter()
        .zip(&b[..n])
        .map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2))
        .sum();
    Ok(sum / n as f64)
}

/// One driven path for path comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub model: String,
    pub position: usize,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDiffMatrix {
    pub models: Vec<String>,
    /// Pairwise differences; `None` for trials from different start positions.
    pub values: Vec<Vec<Option<f64>>>,
    /// Mean over distinct same-start pairs of one model.
    pub within: BTreeMap<String, f64>,
    /// Mean over same-start pairs of two models, keyed `a|b` with `a < b`.
    pub between: BTreeMap<String, f64>,
}

pub fn path_matrix(samples: &[PathSample]) -> Result<PathDiffMatrix, AnalysisError> {
    let n = samples.len();
    let mut values = vec![vec![None; n]; n];
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for i in 0..n {
        for j in i..n {
            if samples[i].position != samples[j].position {
                continue;
            }
            let d = path_difference(&samples[i].points, &samples[j].points)?;
            values[i][j] = Some(d);
            values[j][i] = Some(d);
            if i == j {
                continue;
            }
            let (a, b) = (&samples[i].model, &samples[j].model);
            let key = if a <= b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
            let e = sums.entry(key).or_insert((0.0, 0));
            e.0 += d;
            e.1 += 1;
        }
    }
    let mut within = BTreeMap::new();
    let mut between = BTreeMap::new();
    for ((a, b), (s, c)) in sums {
        let mean = s / c as f64;
        if a == b {
            within.insert(a, mean);
        } else {
            between.insert(format!("{a}|{b}"), mean);
        }
    }
    Ok(PathDiffMatrix {
        models: samples.iter().map(|s| s.model.clone()).collect(),
        values,
        within,
        between,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasAudit {
    pub biases: Vec<f64>,
    /// Softmax of the output biases.
    pub implied_prior: Vec<f64>,
    pub label_distribution: Vec<f64>,
    /// L1 distance between the implied prior and the label distribution.
    pub divergence: f64,
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    crate::tensor::ops::softmax_rows(v, v.len())
}

pub fn bias_audit(net: &crate::tensor::Network, labels: &[f64]) -> Result<BiasAudit, AnalysisError> {
    let biases = net
        .output_bias()
        .ok_or_else(|| AnalysisError::Input("network has no output bias".into()))?
        .to_vec();
    if biases.len() != labels.len() {
        return Err(AnalysisError::Input(format!(
            "{} output biases vs {} label classes",
            biases.len(),
            labels.len()
        )));
    }
    let implied_prior = softmax(&biases);
    let divergence = implied_prior.iter().zip(labels).map(|(a, b)| (a - b).abs()).sum();
    Ok(BiasAudit {
        biases,
        implied_prior,
        label_distribution: labels.to_vec(),
        divergence,
    })
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 255.0;

/// Where SSIM statistics are gathered: over the whole image, or over every
/// `w × w` window and averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SsimMode {
    Global,
    Window(usize),
}

fn ssim_stats(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    // Unbiased moments, as in the common reference implementations.
    let d = (n - 1.0).max(1.0);
    let (va, vb, cov) = (va / d, vb / d, cov / d);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// SSIM of two equal-size single-channel images given as `h × w` values.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, mode: SsimMode) -> Result<f64, AnalysisError> {
    if a.len() != b.len() || a.len() != h * w || a.is_empty() {
        return Err(AnalysisError::Input(format!(
            "SSIM shape mismatch: {} and {} values for {h}×{w}",
            a.len(),
            b.len()
        )));
    }
    match mode {
        SsimMode::Global => Ok(ssim_stats(a, b)),
        SsimMode::Window(k) => {
            if k == 0 || k > h || k > w {
                return Err(AnalysisError::Input(format!("window {k} does not fit {h}×{w}")));
            }
            let mut total = 0.0;
            let mut count = 0;
            let (mut wa, mut wb) = (Vec::with_capacity(k * k), Vec::with_capacity(k * k));
            for y in 0..=h - k {
                for x in 0..=w - k {
                    wa.clear();
                    wb.clear();
                    for dy in 0..k {
                        wa.extend_from_slice(&a[(y + dy) * w + x..][..k]);
                        wb.extend_from_slice(&b[(y + dy) * w + x..][..k]);
                    }
                    total += ssim_stats(&wa, &wb);
                    count += 1;
                }
            }
            Ok(total / count as f64)
        }
    }
}

/// Mean SSIM over the three channel pairs of a 3-channel frame.
pub fn channel_ssim(frame: &Frame, mode: SsimMode) -> Result<f64, AnalysisError> {
    if frame.channels != 3 {
        return Err(AnalysisError::Input(format!("channel SSIM needs 3 channels, got {}", frame.channels)));
    }
    let ch: Vec<Vec<f64>> = (0..3)
        .map(|c| frame.channel(c).data.iter().map(|&v| v as f64).collect())
        .collect();
    let (h, w) = (frame.height, frame.width);
    let mut s = 0.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        s += ssim(&ch[i], &ch[j], h, w, mode)?;
    }
    Ok(s / 3.0)
}

/// Coefficient of determination of the least-squares line `y ~ x`; zero when
/// `y` is constant.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if syy == 0.0 || sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Average ranks, ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = rank;
        }
        i = j + 1;
    }
    r
}

/// Pearson correlation of ranks; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// One trained and evaluated condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label: String,
    pub tail_val_loss: f64,
    pub success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapWitness {
    pub a: String,
    pub b: String,
    pub val_loss_diff: f64,
    pub success_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub phase: u8,
    pub points: Vec<Condition>,
    pub r_squared: Option<f64>,
    pub spearman: Option<f64>,
    pub witnesses: Vec<GapWitness>,
    pub notice: Option<String>,
}

pub const WITNESS_VAL_LOSS: f64 = 0.02;
pub const WITNESS_SUCCESS: f64 = 0.2;

/// Validation loss against success for one phase, with gap witnesses: pairs
/// within [`WITNESS_VAL_LOSS`] in loss whose success differs by at least
/// [`WITNESS_SUCCESS`].
pub fn deployment_gap_report(phase: u8, points: &[Condition]) -> GapReport {
    let x: Vec<f64> = points.iter().map(|c| c.tail_val_loss).collect();
    let y: Vec<f64> = points.iter().map(|c| c.success).collect();
    let (r_squared, spearman, notice) = if points.len() < 3 {
        (None, None, Some(format!("{} conditions: correlation omitted", points.len())))
    } else {
        (Some(r_squared(&x, &y)), spearman(&x, &y), None)
    };
    let mut witnesses = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dv = (x[i] - x[j]).abs();
            let ds = (y[i] - y[j]).abs();
            if dv <= WITNESS_VAL_LOSS + 1e-12 && ds >= WITNESS_SUCCESS - 1e-12 {
                witnesses.push(GapWitness {
                    a: points[i].label.clone(),
                    b: points[j].label.clone(),
                    val_loss_diff: dv,
                    success_diff: ds,
                });
            }
        }
    }
    GapReport {
        phase,
        points: points.to_vec(),
        r_squared,
        spearman,
        witnesses,
        notice,
    }
}

impl GapReport {
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("condition,tail_val_loss,success_rate\n");
        for p in &self.points {
            s += &format!("{},{},{}\n", p.label, p.tail_val_loss, p.success);
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("## Phase {}\n\n| condition | tail val loss | success |\n|---|---|---|\n", self.phase);
        for p in &self.points {
            s += &format!("| {} | {:.4} | {:.3} |\n", p.label, p.tail_val_loss, p.success);
        }
        s.push('\n');
        match (self.r_squared, &self.notice) {
            (_, Some(n)) => s += &format!("{n}\n\n"),
            (Some(r2), None) => {
                s += &format!("R² of the linear fit: {r2:.3}\n\n");
                match self.spearman {
                    Some(rho) => s += &format!("Spearman rank correlation: {rho:.3}\n\n"),
                    None => s += "Spearman rank correlation undefined (constant column)\n\n",
                }
            }
            (None, None) => {}
        }
        if self.witnesses.is_empty() {
            s += "No gap witnesses.\n";
        } else {
            s += "Gap witnesses:\n\n";
            for w in &self.witnesses {
                s += &format!(
                    "- {} vs {}: val loss differs by {:.4}, success by {:.3}\n",
                    w.a, w.b, w.val_loss_diff, w.success_diff
                );
            }
        }
        s
    }
}

/// Predictors for the hyper-parameter importance analysis, one row per
/// condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub condition: String,
    pub flops: f64,
    pub params: f64,
    pub hidden_layers: f64,
    pub max_conv_filters: f64,
    pub tail_val_loss: f64,
    pub initial_val_loss: f64,
    pub path_self_similarity: f64,
    pub input_class: f64,
    pub success_phase1: f64,
    pub success_phase2: f64,
}

pub const FEATURE_NAMES: [&str; 8] = [
    "flops",
    "params",
    "hidden_layers",
    "max_conv_filters",
    "tail_val_loss",
    "initial_val_loss",
    "path_self_similarity",
    "input_class",
];

impl FeatureRow {
    pub fn predictors(&self) -> Vec<f64> {
        vec![
            self.flops,
            self.params,
            self.hidden_layers,
            self.max_conv_filters,
            self.tail_val_loss,
            self.initial_val_loss,
            self.path_self_similarity,
            self.input_class,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_closed_forms() {
        let a: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 0.0)).collect();
        let b: Vec<(f64, f64)> = a.iter().map(|p| (p.0, 0.3)).collect();
        assert_eq!(path_difference(&a, &a).unwrap(), 0.0);
        assert!((path_difference(&a, &b).unwrap() - 0.09).abs() < 1e-15);
        assert!(path_difference(&a, &[]).is_err());
    }

    #[test]
    fn mirror_paths_by_hand() {
        // Mirror images about y = 0: distances 2|y| per step.
        let a = vec![(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)];
        let b = vec![(0.0, 0.0), (1.0, -0.5), (2.0, -1.0)];
        let s = |m: &str, p: &Vec<(f64, f64)>| PathSample {
            model: m.into(),
            position: 0,
            points: p.clone(),
        };
        let m = path_matrix(&[s("a", &a), s("a", &a), s("b", &b), s("b", &b)]).unwrap();
        // (0 + 1 + 4) / 3
        assert!((m.between["a|b"] - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.within["a"], 0.0);
        for i in 0..4 {
            assert_eq!(m.values[i][i], Some(0.0));
            for j in 0..4 {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
        }
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 256) as f64).collect();
        let inv: Vec<f64> = x.iter().map(|v| 255.0 - v).collect();
        for mode in [SsimMode::Global, SsimMode::Window(4)] {
            assert!((ssim(&x, &x, 8, 8, mode).unwrap() - 1.0).abs() < 1e-12);
            assert!(ssim(&x, &inv, 8, 8, mode).unwrap() < 1.0);
            assert_eq!(ssim(&x, &inv, 8, 8, mode).unwrap(), ssim(&inv, &x, 8, 8, mode).unwrap());
        }
        assert!(ssim(&x, &x[..63], 8, 8, SsimMode::Global).is_err());
    }

    #[test]
    fn r_squared_extremes() {
        let x = [0.1, 0.4, 0.2, 0.9];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 3.0 * v).collect();
        assert!((r_squared(&x, &y) - 1.0).abs() < 1e-12);
        assert_eq!(r_squared(&x, &[0.5; 4]), 0.0);
        assert_eq!(spearman(&x, &y), Some(-1.0));
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn constructed_scatter_has_target_r_squared() {
        // y = x + k·e with e orthogonal to x and to constants gives
        // R² = Sxx / (Sxx + k²·See).
        let x = [-3.0, -1.0, 1.0, 3.0, -3.0, -1.0, 1.0, 3.0];
        let e = [1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0];
        let (sxx, see): (f64, f64) = (40.0, 8.0);
        let k = (sxx * (1.0 / 0.46 - 1.0) / see).sqrt();
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + k * b).collect();
        assert!((r_squared(&x, &y) - 0.46).abs() < 1e-12);
    }

    #[test]
    fn gap_witnesses_and_notice() {
        let c = |l: &str, v: f64, s: f64| Condition {
            label: l.into(),
            tail_val_loss: v,
            success: s,
        };
        let r = deployment_gap_report(1, &[c("a", 0.50, 0.9), c("b", 0.51, 0.3)]);
        assert!(r.notice.is_some() && r.r_squared.is_none());
        assert_eq!(r.witnesses.len(), 1);
        let r = deployment_gap_report(1, &[c("a", 0.5, 0.5), c("b", 0.6, 0.5), c("c", 0.7, 0.5)]);
        assert_eq!(r.r_squared, Some(0.0));
        assert!(r.witnesses.is_empty());
        assert!(r.markdown().contains("R²"));
    }

    #[test]
    fn bias_prior_is_shift_invariant() {
        let spec = crate::zoo::build(
            &crate::zoo::ArchitectureId::new(crate::zoo::Family::Fc3, crate::zoo::InputClass::Gray),
            6,
            8,
        )
        .unwrap();
        let mut net = crate::tensor::Network::new(spec, 0).unwrap();
        let a = bias_audit(&net, &[0.25; 4]).unwrap();
        assert_eq!(a.implied_prior, vec![0.25; 4]);
        net.output_bias_mut().unwrap().fill(3.7);
        let a = bias_audit(&net, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        for p in &a.implied_prior {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((a.divergence - 0.4).abs() < 1e-12);
    }
}
