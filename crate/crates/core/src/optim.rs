//! Adam with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(alloc::format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::Config(alloc::format!(
                "weight_decay must be in [0, 1), got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(alloc::format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(alloc::format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of every trainable tensor in `store`, followed by
/// `p ← p·(1 − lr·weight_decay)`. Buffers are left alone.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(crate::dim_err!(
            "{} parameters, {} gradients, {} optimizer slots",
            store.len(),
            grads.len(),
            state.m.len()
        ));
    }
    if let Some((p, i)) = grads.first_non_finite() {
        let id = store.ids().nth(p).expect("index in range");
        return Err(Error::NonFinite {
            context: alloc::format!("gradient of {}", store.name(id)),
            index: i,
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - math::powi(cfg.beta1, t);
    let bc2 = 1.0 - math::powi(cfg.beta2, t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if !store.is_trainable(id) {
            continue;
        }
        let g = grads.get(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= cfg.lr * mh / (math::sqrt(vh) + cfg.eps);
            p[i] *= decay;
        }
    }
    Ok(())
}
