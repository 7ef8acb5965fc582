//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
    /// Entries that receive weight decay; `None` decays nothing.
    decay_mask: Option<Vec<bool>>,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(len: usize, weight_decay: f64, decay_mask: Option<Vec<bool>>) -> Result<Self> {
        if !(weight_decay >= 0.0) {
            return Err(Error::arg("weight decay must be nonnegative"));
        }
        if decay_mask.as_ref().is_some_and(|m| m.len() != len) {
            return Err(Error::arg("decay mask length differs from the parameter count"));
        }
        Ok(Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            steps: 0,
            decay_mask,
            weight_decay,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg("parameter, gradient and state lengths differ"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.steps += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::one() - T::lit(BETA1.powi(self.steps as i32));
        let c2 = T::one() - T::lit(BETA2.powi(self.steps as i32));
        let lr_t = T::lit(lr);
        let shrink = T::one() - T::lit(lr * self.weight_decay);
        let eps = T::lit(EPSILON);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            if self.decay_mask.as_ref().is_some_and(|m| m[i]) {
                params[i] *= shrink;
            }
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then half-cosine decay
/// to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
