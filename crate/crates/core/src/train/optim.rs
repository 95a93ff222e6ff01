//! Momentum SGD and the warmup-cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Velocity per parameter tensor, aligned with the store's ids.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        let velocity = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { momentum, velocity }
    }
}

/// `v ← m·v + g`, then `p ← p − lr·v`.
pub fn sgd_momentum_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::invalid(
            "sgd_momentum_step",
            format!("{} params, {} grads, {} velocities", store.len(), grads.len(), state.velocity.len()),
        ));
    }
    for id in store.ids().collect::<Vec<_>>() {
        let (g, v) = (&grads[id.index()], &mut state.velocity[id.index()]);
        if g.shape() != v.shape() {
            return Err(Error::shape("sgd_momentum_step", g.shape(), v.shape()));
        }
        let m = state.momentum;
        let p = store.get_mut(id);
        for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = m * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Linear ramp to `base_lr` over `warmup_steps`, then half-cosine decay to 0.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
