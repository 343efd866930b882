use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, check_finite, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("adam parameters", self.first_moment.len(), params.len())?;
        check_dim("adam gradients", params.len(), grads.len())?;
        check_finite("adam gradient", grads)?;
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(params: &[f64], grads: &[f64], state: &AdamState) -> Result<(Vec<f64>, AdamState)> {
    let mut p = params.to_vec();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}

/// Gradient step rule used by the learners.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    /// Plain gradient descent `p ← p − lr·g`.
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    pub fn adam(len: usize, config: AdamConfig) -> Self {
        Optimizer::Adam(AdamState::new(len, config))
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self {
            Optimizer::Adam(state) => state.step(params, grads),
            Optimizer::Sgd { learning_rate } => {
                check_dim("sgd gradients", params.len(), grads.len())?;
                check_finite("sgd gradient", grads)?;
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= *learning_rate * g;
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let state = AdamState::new(3, AdamConfig::default());
        let (p, s) = adam_step(&[1.0, -2.0, 0.5], &[0.0; 3], &state).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let state = AdamState::new(1, AdamConfig::with_lr(1e-3));
        let (p, _) = adam_step(&[0.0], &[1.0], &state).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + ε)
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let cfg = AdamConfig::with_lr(1e-2);
        let mut state = AdamState::new(2, cfg);
        let mut p = vec![0.3, -0.7];
        let grads = [[0.5, -1.5], [0.5, -1.5]];
        for g in &grads {
            state.step(&mut p, g).unwrap();
        }
        for k in 0..2 {
            let (mut x, mut m, mut v) = (if k == 0 { 0.3 } else { -0.7 }, 0.0, 0.0);
            for (t, g) in grads.iter().enumerate() {
                let g = g[k];
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - libm::pow(0.9, (t + 1) as f64));
                let vh = v / (1.0 - libm::pow(0.999, (t + 1) as f64));
                x -= 1e-2 * mh / (libm::sqrt(vh) + 1e-8);
            }
            assert!((p[k] - x).abs() < 1e-12);
        }
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut state = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0; 3];
        assert!(state.step(&mut p, &[0.0; 3]).is_err());
    }
}
