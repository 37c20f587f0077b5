use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Adam moment buffers and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(3e-5)
    }
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn restore_moments(&mut self, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        self.first_moment = first;
        self.second_moment = second;
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }
}

/// One bias-corrected Adam update of `params` from their gradient slots.
///
/// Moment buffers are allocated on the first step; afterwards they must
/// match the parameter shapes. Rejects non-finite gradients before touching
/// any parameter.
pub fn adam_step(state: &mut OptimizerState, params: &mut [&mut Tensor]) -> Result<()> {
    if state.first_moment.is_empty() && state.step == 0 {
        state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len()
        || params.iter().zip(&state.first_moment).any(|(p, m)| p.len() != m.len())
    {
        return Err(TensorError::OptimizerMismatch(format!(
            "{} moment buffers for {} parameters",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (pi, p) in params.iter().enumerate() {
        if let Some(g) = p.grad() {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient { param: pi, index });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap();
        t.grad_mut()[0] = g;
        t
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut a = scalar(1.5, 0.0);
        let mut b = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        b.grad_mut();
        let mut s = OptimizerState::new(0.1);
        for _ in 0..5 {
            adam_step(&mut s, &mut [&mut a, &mut b]).unwrap();
        }
        assert_eq!(a.data(), &[1.5]);
        assert_eq!(b.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε).
        let (lr, g) = (3e-5, 0.37);
        let mut p = scalar(2.0, g);
        let mut s = OptimizerState::new(lr);
        adam_step(&mut s, &mut [&mut p]).unwrap();
        let expected = 2.0 - lr * g / (g + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!(((2.0 - p.data()[0]) - lr).abs() < 1e-11);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = scalar(-4.0, 123.0);
        let mut s = OptimizerState::new(0.0);
        for _ in 0..3 {
            adam_step(&mut s, &mut [&mut p]).unwrap();
        }
        assert_eq!(p.data(), &[-4.0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar(1.0, f64::NAN);
        let mut s = OptimizerState::default();
        assert!(matches!(
            adam_step(&mut s, &mut [&mut p]),
            Err(TensorError::NonFiniteGradient { param: 0, index: 0 })
        ));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn mismatched_buffers_rejected() {
        let mut a = scalar(1.0, 1.0);
        let mut s = OptimizerState::default();
        adam_step(&mut s, &mut [&mut a]).unwrap();
        let mut b = Tensor::zeros(&[2]);
        assert!(matches!(
            adam_step(&mut s, &mut [&mut b]),
            Err(TensorError::OptimizerMismatch(_))
        ));
    }
}
