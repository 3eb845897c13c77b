//! AdamW, global-norm clipping and the warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// step `total`. Steps are 1-based: `lr(warmup) = peak`, `lr(total) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup.max(1) as f64;
        }
        let decay = self.total.saturating_sub(self.warmup).max(1) as f64;
        let t = (step - self.warmup).min(self.total - self.warmup) as f64;
        0.5 * self.peak * (1.0 + (PI * t / decay).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Decoupled-weight-decay Adam. Decay is applied to tensors of rank ≥ 2
/// (conv/linear weights and bias tables), not to biases or norm affines.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u32,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamW { cfg, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update; `grads[i]` belongs to the i-th registered parameter.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.value.ndim() >= 2 { lr * c.weight_decay } else { 0.0 };
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = g.as_f64();
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                let mut x = w.as_f64();
                x -= decay * x;
                x -= lr * update;
                *w = T::from_f64(x);
            }
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}
