//! Adam with decoupled-from-nothing classic L2 weight decay folded into the
//! gradient, bias-corrected first and second moments.

use crate::error::{PopError, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment buffers for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        AdamState {
            cfg,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Scheduled learning-rate drops mutate the stored config in place.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over a flat parameter slice. `grad` must match `params`
    /// and the length fixed at construction.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(PopError::invalid(format!(
                "adam step on {} params / {} grads with state sized {}",
                params.len(),
                grad.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let lr = T::from_f64(self.cfg.lr);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        for i in 0..params.len() {
            let g = grad[i] + wd * params[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three hand-stepped updates on f(x) = x² from x = 1, lr = 0.1, no decay.
    #[test]
    fn matches_hand_iteration_on_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::<f64>::new(cfg, 1);
        let mut x = vec![1.0f64];

        // Independent trace of the same recurrence in scalar arithmetic.
        let (b1, b2, eps) = (0.9f64, 0.999, 1e-8);
        let (mut m, mut v, mut xr) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=3u32 {
            let g = 2.0 * x[0];
            opt.step(&mut x, &[g]).unwrap();

            let gr = 2.0 * xr;
            m = b1 * m + (1.0 - b1) * gr;
            v = b2 * v + (1.0 - b2) * gr * gr;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            xr -= 0.1 * mhat / (vhat.sqrt() + eps);
            assert!(
                (x[0] - xr).abs() <= 1e-10,
                "step {t}: {} vs {xr}",
                x[0]
            );
            if t == 1 {
                // First step moves by almost exactly lr (bias correction
                // makes mhat/√vhat ≈ sign(g)).
                assert!((1.0 - xr - 0.1).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn weight_decay_pulls_toward_zero_with_zero_gradient() {
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = AdamState::<f64>::new(cfg, 1);
        let mut x = vec![5.0f64];
        for _ in 0..50 {
            opt.step(&mut x, &[0.0]).unwrap();
        }
        assert!(x[0] < 5.0 && x[0] > 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut opt = AdamState::<f32>::new(AdamConfig::default(), 2);
        let mut x = vec![0.0f32; 3];
        assert!(opt.step(&mut x, &[0.0; 3]).is_err());
    }
}
