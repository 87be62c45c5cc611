use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(AdamState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        })
    }

    /// One bias-corrected Adam update. Nothing is modified when a gradient
    /// is non-finite; a non-finite parameter after the update is an error
    /// (the step is still applied, so callers should discard the state).
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("gradient for '{name}' has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} at element {i} of '{name}' (step {})",
                    g.data()[i],
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::Config(format!("no Adam state for '{name}'")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::Config(format!("no Adam state for '{name}'")))?;
            let dtype = p.dtype();
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi = dtype.round(*pi - lr * mh / (vh.sqrt() + eps));
            }
            if !p.all_finite() {
                return Err(Error::Numerical(format!(
                    "parameter '{name}' became non-finite at step {}",
                    self.t
                )));
            }
        }
        Ok(())
    }
}
