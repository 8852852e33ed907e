use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::emulator::ModelParams;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient `λ`, added as `λ·θ` to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment estimates per parameter path.
#[derive(Clone, Debug, Default)]
pub struct AdamState<S> {
    pub step: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice.
pub fn adam_update<S: Scalar>(
    theta: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    step: u64,
    cfg: &AdamConfig,
) {
    let b1 = S::from_f64_lossy(cfg.beta1);
    let b2 = S::from_f64_lossy(cfg.beta2);
    let one = S::one();
    let lam = S::from_f64_lossy(cfg.weight_decay);
    let bc1 = S::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = S::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let lr = S::from_f64_lossy(cfg.lr);
    let eps = S::from_f64_lossy(cfg.eps);
    for i in 0..theta.len() {
        let g = grad[i] + lam * theta[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Apply one Adam step to every learnable parameter that has a gradient.
pub fn adam_step<S: Scalar>(
    model: &mut ModelParams<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (path, g) in grads {
        if !g.all_finite() {
            return Err(CoreError::NonFiniteGradient(path.clone()));
        }
    }
    state.step += 1;
    for (path, g) in grads {
        let learnable = model.kind(path).is_some_and(|k| k.learnable());
        if !learnable {
            continue;
        }
        let theta = model.tensor_mut(path).ok_or_else(|| {
            CoreError::invalid(format!("gradient for unknown parameter `{path}`"))
        })?;
        let n = theta.len();
        let m = state
            .m
            .entry(path.clone())
            .or_insert_with(|| vec![S::zero(); n]);
        let v = state
            .v
            .entry(path.clone())
            .or_insert_with(|| vec![S::zero(); n]);
        adam_update(theta.data_mut(), g.data(), m, v, state.step, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_on_square_moves_by_lr() {
        // f(θ) = θ², θ₀ = 1 → g = 2
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut theta = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut theta, &[2.0], &mut m, &mut v, 1, &cfg);
        let expect = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8));
        assert!((theta[0] - expect).abs() < 1e-15);
        assert!((theta[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut theta = [0.5f32, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(theta, [0.5, -2.0]);
    }

    #[test]
    fn decay_alone_shrinks_toward_zero() {
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut theta = [2.0f64, -3.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut theta, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        // first step is sign(λθ)·lr up to eps
        assert!((theta[0] - (2.0 - 0.01)).abs() < 1e-9);
        assert!((theta[1] - (-3.0 + 0.01)).abs() < 1e-9);
    }
}
