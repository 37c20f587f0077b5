//! Central finite-difference check of [`Network`] gradients.
//!
//! The objective is the train-mode mean cross-entropy plus the L2 decay
//! term, the same quantity [`Network::backward_cross_entropy`] differentiates.
//! Dropout masks are a pure function of the dropout seed, so repeated
//! train-mode passes see the same mask.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::cross_entropy;
use super::{Mode, Network, Result, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled from every parameter tensor (all if smaller).
    pub per_tensor: usize,
    /// Gradients smaller than this are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            per_tensor: 6,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose difference quotient at `step` and `step/2`
    /// disagree: the probe straddles a relu or max-pool switch.
    pub kinks: usize,
    pub max_rel_err: f64,
    /// `(tensor index, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn objective(net: &mut Network, input: &Tensor, labels: &[usize]) -> Result<f64> {
    let out = net.forward(input, Mode::Train)?;
    Ok(cross_entropy(out.data(), labels, net.output_width())? + net.weight_decay_loss())
}

pub fn check_gradients(net: &Network, input: &Tensor, labels: &[usize], opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut analytic_net = net.clone();
    analytic_net.forward(input, Mode::Train)?;
    analytic_net.backward_cross_entropy(labels)?;
    let analytic: Vec<Vec<f64>> = analytic_net
        .trainable()
        .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut probe = net.clone();
    let f0 = objective(&mut probe, input, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (ti, grads) in analytic.iter().enumerate() {
        let len = grads.len();
        let picks: Vec<usize> = if len <= opts.per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.per_tensor).into_vec()
        };
        for idx in picks {
            let mut eval = |delta: f64| -> Result<f64> {
                let original = probe.trainable_mut()[ti].data()[idx];
                probe.trainable_mut()[ti].data_mut()[idx] = original + delta;
                let f = objective(&mut probe, input, labels);
                probe.trainable_mut()[ti].data_mut()[idx] = original;
                f
            };
            let h = opts.step;
            let (fp, fm) = (eval(h)?, eval(-h)?);
            let (fp2, fm2) = (eval(h / 2.0)?, eval(-h / 2.0)?);
            let numeric = (fp - fm) / (2.0 * h);
            let half = (fp2 - fm2) / h;
            // Curvature estimates agree across scales for a smooth objective;
            // a switch within the probe interval doubles the finer one.
            let curv = (fp - 2.0 * f0 + fm) / (h * h);
            let curv_half = (fp2 - 2.0 * f0 + fm2) / (h * h / 4.0);
            let curv_noise = 64.0 * f64::EPSILON * f0.abs().max(1.0) / (h * h);
            let a = grads[idx];
            let scale = numeric.abs().max(half.abs()).max(opts.floor);
            let kinked = (numeric - half).abs() / scale > 1e-4
                || (curv - curv_half).abs() > 0.1 * curv.abs().max(curv_half.abs()) + curv_noise;
            if kinked {
                report.kinks += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((ti, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
