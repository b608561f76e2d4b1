//! Adam over the trainable subset of a [`ParamStore`]. Frozen parameters
//! never get moment buffers and are never written.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::peft::ParameterPartition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        Ok(())
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Host copy of the optimizer moments, for checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(store: &ParamStore, partition: &ParameterPartition, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let mut slots = Vec::new();
        for name in partition.trainable_names() {
            let p = store
                .get(name)
                .ok_or_else(|| Error::InvalidState(format!("partition names unknown parameter '{name}'")))?;
            slots.push(Slot {
                name: name.to_string(),
                var: p.var.clone(),
                m: p.var.zeros_like()?,
                v: p.var.zeros_like()?,
            });
        }
        Ok(Self { cfg, step: 0, slots })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Names of the parameters this optimizer updates.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// One update from `grads`. Parameters without a gradient keep their
    /// value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            let m = ((&s.m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)?.div(&denom)? * lr)?;
            s.var.set(&s.var.as_tensor().sub(&update)?)?;
            s.m = m;
            s.v = v;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamState> {
        let mut moments = BTreeMap::new();
        for s in &self.slots {
            let host = |t: &Tensor| -> Result<Vec<f32>> {
                Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
            };
            moments.insert(s.name.clone(), (host(&s.m)?, host(&s.v)?));
        }
        Ok(AdamState {
            step: self.step,
            moments,
        })
    }

    /// Restores moments saved by [`Adam::state`]. The tracked set must match.
    pub fn load_state(&mut self, state: &AdamState) -> Result<()> {
        if state.moments.len() != self.slots.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state tracks {} parameters, model trains {}",
                state.moments.len(),
                self.slots.len()
            )));
        }
        for s in &mut self.slots {
            let (m, v) = state
                .moments
                .get(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("no optimizer state for '{}'", s.name)))?;
            let dev = s.var.device();
            let dt = s.var.dtype();
            let shape = s.var.shape().clone();
            if m.len() != shape.elem_count() || v.len() != shape.elem_count() {
                return Err(Error::Checkpoint(format!("optimizer state for '{}' has wrong size", s.name)));
            }
            s.m = Tensor::from_slice(m, shape.clone(), dev)?.to_dtype(dt)?;
            s.v = Tensor::from_slice(v, shape, dev)?.to_dtype(dt)?;
        }
        self.step = state.step;
        Ok(())
    }
}
