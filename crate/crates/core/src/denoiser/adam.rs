use serde::{Deserialize, Serialize};

use super::{DenoiserParams, Scalar};

/// Adam with decoupled weight decay.
///
/// Per step, with bias-corrected moments `m_hat`, `v_hat`:
///
/// ```text
/// p <- p * (1 - lr * weight_decay)
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: DenoiserParams<T>,
    v: DenoiserParams<T>,
}

impl<T: Scalar> AdamW<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;
    pub const WEIGHT_DECAY: f64 = 1e-2;

    pub fn new(like: &DenoiserParams<T>) -> Self {
        Self::with_weight_decay(like, Self::WEIGHT_DECAY)
    }

    pub fn with_weight_decay(like: &DenoiserParams<T>, weight_decay: f64) -> Self {
        Self {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            weight_decay,
            step: 0,
            m: DenoiserParams::zeros(like.config),
            v: DenoiserParams::zeros(like.config),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut DenoiserParams<T>, grads: &DenoiserParams<T>, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        self.step += 1;
        let c = |v: f64| T::from_f64(v).expect("representable");
        let b1 = c(self.beta1);
        let b2 = c(self.beta2);
        let one = T::one();
        let bias1 = c(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = c(1.0 - self.beta2.powi(self.step as i32));
        let lr_t = c(lr);
        let eps = c(self.eps);
        let decay = c(1.0 - lr * self.weight_decay);

        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] = p[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Linear warm-up to `base` over the first `warmup_steps` iterations, then
/// constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// Warm-up over `fraction` of `total_steps` (rounded up).
    pub fn with_warmup_fraction(base: f64, total_steps: usize, fraction: f64) -> Self {
        Self {
            base,
            warmup_steps: (total_steps as f64 * fraction).ceil() as usize,
        }
    }

    /// Learning rate for zero-based iteration `iter`.
    pub fn at(&self, iter: usize) -> f64 {
        if iter < self.warmup_steps {
            self.base * (iter + 1) as f64 / self.warmup_steps as f64
        } else {
            self.base
        }
    }
}
