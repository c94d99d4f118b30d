use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Moment buffers are allocated lazily on the first step and matched to the
/// parameter list by position, so callers must pass parameters in the same
/// order every step.
#[derive(Clone, Debug)]
pub struct AdamW<T: Float = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update using each tensor's accumulated gradient. Tensors
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors but received {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let lr = T::of(c.lr);
        let wd = T::of(c.weight_decay);
        let eps = T::of(c.eps);
        let bc1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(Error::dim("parameter size changed between optimizer steps"));
            }
            let grad = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] - lr * wd * data[i];
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
