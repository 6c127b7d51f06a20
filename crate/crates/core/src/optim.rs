//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `min_lr + ½(lr − min_lr)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr: f64, min_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (lr - min_lr) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates keyed by parameter name, plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

pub struct AdamW {
    cfg: AdamWConfig,
    vars: BTreeMap<String, Var>,
    state: AdamState,
}

impl AdamW {
    pub fn new(vars: BTreeMap<String, Var>, cfg: AdamWConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &vars {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            cfg,
            vars,
            state: AdamState { m, v, t: 0 },
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Replaces the moments; names and shapes must match the parameters.
    pub fn load_state(&mut self, state: AdamState) -> Result<()> {
        for (name, var) in &self.vars {
            for (which, map) in [("m", &state.m), ("v", &state.v)] {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing adam.{which}.{name}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::ParamShape {
                        name: format!("adam.{which}.{name}"),
                        expected: var.dims().to_vec(),
                        found: t.dims().to_vec(),
                    });
                }
            }
        }
        let dtype = self.vars.values().next().map(|v| v.dtype());
        let cast = |map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            map.into_iter()
                .filter(|(k, _)| self.vars.contains_key(k))
                .map(|(k, t)| Ok((k, match dtype { Some(d) => t.to_dtype(d)?, None => t })))
                .collect()
        };
        self.state = AdamState {
            m: cast(state.m)?,
            v: cast(state.v)?,
            t: state.t,
        };
        Ok(())
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.state.t += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let t = self.state.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so moments do not keep this step's graph alive
            let g = g.detach();
            let p = var.as_tensor().detach();
            let m = self.state.m.get_mut(name).expect("moment per var");
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = self.state.v.get_mut(name).expect("moment per var");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let denom = ((&*v / bc2)?.sqrt()? + eps)?;
            let decayed = (p * (1.0 - lr * weight_decay))?;
            let next = (decayed - (m_hat.div(&denom)? * lr)?)?;
            var.set(&next)?;
        }
        Ok(())
    }
}
