//! Adam with step-count learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the `decay` factor is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `lr_t = lr / (1 + decay * t)`.
    LearningRate,
    /// Constant `lr`; `decay * theta` is added to every gradient (L2 penalty).
    Weight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.004,
            decay_mode: DecayMode::LearningRate,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect at step `t` (1-based).
    pub fn rate_at(&self, t: u64) -> f64 {
        match self.decay_mode {
            DecayMode::LearningRate => self.learning_rate / (1.0 + self.decay * t as f64),
            DecayMode::Weight => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay >= 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for each optimized tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `sizes`.
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            t: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One Adam update over parallel lists of parameter and gradient tensors.
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam got {} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::ShapeMismatch(format!("adam tensor {i} sizes disagree")));
        }
    }
    state.t += 1;
    let t = state.t;
    let lr = T::from_f64_lossy(cfg.rate_at(t));
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one_minus_b1 = T::from_f64_lossy(1.0 - cfg.beta1);
    let one_minus_b2 = T::from_f64_lossy(1.0 - cfg.beta2);
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t as i32));
    let eps = T::from_f64_lossy(cfg.eps);
    let l2 = match cfg.decay_mode {
        DecayMode::Weight => T::from_f64_lossy(cfg.decay),
        DecayMode::LearningRate => T::zero(),
    };
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let grad = g[j] + l2 * p[j];
            m[j] = b1 * m[j] + one_minus_b1 * grad;
            v[j] = b2 * v[j] + one_minus_b2 * grad * grad;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
