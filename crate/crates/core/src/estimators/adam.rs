use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(OptimizerState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

/// One bias-corrected Adam step that decreases the loss whose gradients
/// (store order, parameter shapes) are given.
pub fn adam_update(state: &mut OptimizerState, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::usage("gradient list does not match the parameter store"));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.iter().zip(grads) {
        if g.shape() != store.get(*id).shape() {
            return Err(Error::usage(format!(
                "gradient for {} has shape {:?}",
                store.name(*id),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::numeric("adam", format!("non-finite gradient for {}", store.name(*id))));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (i, (id, g)) in ids.iter().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(*id).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}
