//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{CshockError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Optimizer state: step counter plus per-parameter moment buffers aligned
/// with the trainable entries of the [`ParamSet`] it was created for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let sizes: Vec<usize> = params
            .trainable_entries()
            .map(|e| e.tensor.len())
            .collect();
        Self {
            config,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One Adam update. `grads` must be aligned with the trainable entries of
    /// `params`, in order.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        let n_trainable = params.trainable_entries().count();
        if grads.len() != n_trainable || self.first_moment.len() != n_trainable {
            return Err(CshockError::Shape(format!(
                "adam: {} gradients for {} trainable parameters (state tracks {})",
                grads.len(),
                n_trainable,
                self.first_moment.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (idx, entry) in params.trainable_entries_mut().enumerate() {
            let g = &grads[idx];
            if g.len() != entry.tensor.len() {
                return Err(CshockError::Shape(format!(
                    "adam: gradient length {} does not match parameter '{}' length {}",
                    g.len(),
                    entry.name,
                    entry.tensor.len()
                )));
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let data = entry.tensor.data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::vector(values.to_vec()), true).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(&[1.0, -2.0]);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.apply(&mut params, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Bias-corrected moments cancel the magnitude on step one:
        // delta = -lr * g / (|g| + eps).
        let mut params = one_param(&[0.5, 0.5]);
        let lr = 1e-3;
        let mut state = AdamState::new(AdamConfig::with_learning_rate(lr), &params);
        state.apply(&mut params, &[vec![3.0, -0.2]]).unwrap();
        let got = params.get("w").unwrap().data().to_vec();
        assert!((got[0] - (0.5 - lr)).abs() < 1e-9);
        assert!((got[1] - (0.5 + lr)).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut params = one_param(&[0.25]);
        let mut state = AdamState::new(AdamConfig::with_learning_rate(0.0), &params);
        state.apply(&mut params, &[vec![7.0]]).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.25]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = one_param(&[0.25, 0.5]);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(state.apply(&mut params, &[vec![1.0]]).is_err());
        assert!(state.apply(&mut params, &[]).is_err());
    }

    #[test]
    fn step_counter_increases_by_one_per_call() {
        let mut params = one_param(&[0.0]);
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for expect in 1..=5 {
            state.apply(&mut params, &[vec![0.1]]).unwrap();
            assert_eq!(state.step, expect);
        }
    }
}
