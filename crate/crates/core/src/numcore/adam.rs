use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam moments for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.second[i]
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                axis: "parameters",
                expected: self.first.len(),
                found: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    axis: "parameter length",
                    expected: m.len(),
                    found: if p.len() != m.len() { p.len() } else { g.len() },
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut params = vec![Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::zeros([3])]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 0.5]);

        adam.step(&mut params, &[Tensor::full([3], 0.3)]).unwrap();
        let (m0, v0) = (adam.first_moment(0)[0], adam.second_moment(0)[0]);
        adam.step(&mut params, &[Tensor::zeros([3])]).unwrap();
        assert!(adam.first_moment(0)[0] < m0 && adam.first_moment(0)[0] > 0.0);
        assert!(adam.second_moment(0)[0] < v0 && adam.second_moment(0)[0] > 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let cfg = AdamConfig::default();
        let g = [0.25, -3.0, 1e-3];
        let mut params = vec![Tensor::zeros([3])];
        let mut adam = Adam::new(cfg, &params);
        adam.step(&mut params, &[Tensor::new([3], g.to_vec()).unwrap()]).unwrap();
        for (p, gi) in params[0].data().iter().zip(g) {
            let want = -cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((p - want).abs() < 1e-9, "{p} vs {want}");
        }
    }

    #[test]
    fn constant_gradient_step_is_bounded_by_learning_rate() {
        let cfg = AdamConfig::with_learning_rate(0.01);
        let mut params = vec![Tensor::zeros([1])];
        let mut adam = Adam::new(cfg, &params);
        let mut prev = 0.0;
        for _ in 0..500 {
            adam.step(&mut params, &[Tensor::scalar(7.0)]).unwrap();
            let now = params[0].item();
            let delta = now - prev;
            assert!(delta < 0.0 && delta.abs() <= cfg.learning_rate * (1.0 + 1e-9));
            prev = now;
        }
        assert!((prev / 500.0 + cfg.learning_rate).abs() < 1e-6);
    }

    #[test]
    fn step_counter_and_shape_checks() {
        let mut params = vec![Tensor::zeros([2])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert_eq!(adam.first_moment(0), &[0.0, 0.0]);
        assert_eq!(adam.second_moment(0), &[0.0, 0.0]);
        assert!(adam.step(&mut params, &[Tensor::zeros([3])]).is_err());
        assert_eq!(adam.step_count(), 0);
        adam.step(&mut params, &[Tensor::zeros([2])]).unwrap();
        adam.step(&mut params, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(adam.step_count(), 2);
    }
}
