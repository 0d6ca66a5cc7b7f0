//! RMSProp without momentum and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamSet, Tensor};

pub const RMSPROP_DECAY: f64 = 0.99;
pub const MAX_GRAD_NORM: f64 = 0.5;

/// Global L2 norm over every tensor of every group.
pub fn global_norm(groups: &[Vec<Tensor>]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .map(Tensor::sum_of_squares)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradient_norm(groups: &mut [Vec<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(groups);
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in groups.iter_mut().flat_map(|g| g.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub eps: f64,
    pub alpha: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            eps: 1e-5,
            alpha: RMSPROP_DECAY,
        }
    }
}

/// Per-parameter squared-gradient accumulators for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub config: RmsPropConfig,
    v: Vec<Tensor>,
}

impl RmsPropState {
    pub fn new(params: &ParamSet, config: RmsPropConfig) -> Self {
        Self {
            config,
            v: params.zeros_like(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.v
    }

    /// `v ← αv + (1−α)g²;  θ ← θ − lr·g/(√v + ε)`
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        let RmsPropConfig { lr, eps, alpha } = self.config;
        for (i, g) in grads.iter().enumerate() {
            let v = self.v[i].data_mut();
            let theta = params.get_mut(i).data_mut();
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = alpha * *vi + (1.0 - alpha) * gi * gi;
                *t -= lr * gi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Clips the joint gradient of several parameter sets and applies one
/// RMSProp step to each. Returns the pre-clip norm.
pub fn clipped_step(params: &mut [&mut ParamSet], states: &mut [RmsPropState], mut grads: Vec<Vec<Tensor>>, max_norm: f64) -> f64 {
    let norm = clip_gradient_norm(&mut grads, max_norm);
    for ((p, s), g) in params.iter_mut().zip(states.iter_mut()).zip(&grads) {
        s.update(p, g);
    }
    norm
}
