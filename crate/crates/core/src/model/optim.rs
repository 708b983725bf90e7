use serde::{Deserialize, Serialize};

use super::PolicyModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    /// One update. Non-finite gradients leave both model and state untouched.
    pub fn apply(&mut self, model: &mut PolicyModel, grads: &[f64]) -> Result<()> {
        self.apply_to(model.params_mut(), grads)
    }

    pub fn apply_to(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                expected: params.len(),
                found: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Rejected(format!(
                "non-finite gradient at coordinate {i}"
            )));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay(lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![0.5, -1.0, 2.0];
        let mut opt = AdamW::new(no_decay(0.1), 3);
        for _ in 0..5 {
            opt.apply_to(&mut params, &[0.0; 3]).unwrap();
        }
        assert_eq!(params, vec![0.5, -1.0, 2.0]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let start = vec![1.0, 1.0, 1.0, 1.0];
        let grads = [3.0, -0.001, 1e-3, -250.0];
        let mut params = start.clone();
        let mut opt = AdamW::new(no_decay(0.01), 4);
        opt.apply_to(&mut params, &grads).unwrap();
        for i in 0..4 {
            let disp = params[i] - start[i];
            assert_eq!(disp.signum(), -grads[i].signum());
            // Bias correction makes the first step almost exactly lr in size.
            assert!((disp.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut params = vec![1.0, 2.0];
        let mut opt = AdamW::new(no_decay(0.1), 2);
        assert!(matches!(
            opt.apply_to(&mut params, &[f64::NAN, 0.0]),
            Err(Error::Rejected(_))
        ));
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(θ) = Σ a_i (θ_i − c_i)²
        let a = [1.0, 3.0, 0.5, 10.0];
        let c = [0.3, -2.0, 1.5, 0.0];
        let loss = |p: &[f64]| -> f64 {
            p.iter()
                .zip(&a)
                .zip(&c)
                .map(|((x, a), c)| a * (x - c).powi(2))
                .sum()
        };
        // Far enough out that 500 steps of size ~lr never reach the bottom,
        // where Adam's normalized steps start to oscillate.
        let mut params = vec![7.0, 5.0, -6.0, 6.5];
        let mut opt = AdamW::new(no_decay(1e-2), 4);
        let mut history = vec![loss(&params)];
        for _ in 0..500 {
            let g: Vec<f64> = params
                .iter()
                .zip(&a)
                .zip(&c)
                .map(|((x, a), c)| 2.0 * a * (x - c))
                .collect();
            opt.apply_to(&mut params, &g).unwrap();
            history.push(loss(&params));
        }
        for w in history[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
        assert!(history[500] < 0.5 * history[0]);
    }
}
