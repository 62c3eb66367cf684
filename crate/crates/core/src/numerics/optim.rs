use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over one parameter group with a single learning rate.
///
/// Moment buffers are keyed by position, so every call to [`Adam::step`]
/// must pass the group's tensors in the same order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Self {
            lr,
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Clears the gradient buffers of `params`.
    pub fn zero_grad(params: &mut [&mut Tensor]) {
        for p in params.iter_mut() {
            p.zero_grad();
        }
    }

    /// Rescales the accumulated gradients of `params` so their joint L2 norm
    /// is at most `max_norm`; returns the norm before rescaling.
    pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
        let norm = params
            .iter()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm && norm.is_finite() {
            let k = max_norm / norm;
            for p in params.iter_mut().filter(|p| p.grad().is_some()) {
                p.grad_mut().iter_mut().for_each(|x| *x *= k);
            }
        }
        norm
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// A tensor without a gradient buffer is treated as having zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::state(format!(
                "optimizer built for {} tensors, stepped with {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.numel() != m.len() {
                return Err(Error::dim("adam step", &[m.len()], p.shape()));
            }
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; m.len()],
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training("non-finite gradient".into()));
            }
            let data = p.data_mut();
            for k in 0..data.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= self.lr * mhat / (vhat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![1.0, -1.0]);
        p.accumulate_grad(&[0.5, -2.0]).unwrap();
        let mut opt = Adam::new(0.1, AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        // Bias-corrected first step is lr·sign(g) up to eps.
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let mut p = Tensor::vector(vec![0.123_456_789, -3.5e-7]);
        let before = p.clone();
        let mut opt = Adam::new(0.0, AdamConfig::default());
        for _ in 0..5 {
            p.accumulate_grad(&[1.0, -4.0]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.data(), before.data());
    }

    #[test]
    fn rejects_changed_group() {
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        let mut opt = Adam::new(0.1, AdamConfig::default());
        opt.step(&mut [&mut a]).unwrap();
        assert!(opt.step(&mut [&mut a, &mut b]).is_err());
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut p = Tensor::vector(vec![1.0]);
        p.accumulate_grad(&[f64::NAN]).unwrap();
        let mut opt = Adam::new(0.1, AdamConfig::default());
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Training(_))));
    }
}
