use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{PenError, Result};
use crate::network::layers::ParamStore;

/// Adam with bias correction. Moments are kept per parameter name so the
/// state can be written into a checkpoint and restored exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter of `store` that has a gradient in `grads`.
    /// Moments are keyed by `prefix + name`.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, prefix: &str) -> Result<()> {
        self.t += 1;
        self.apply(store, grads, prefix)
    }

    /// Steps several stores as one update.
    pub fn step_many(&mut self, stores: &[(&ParamStore, &str)], grads: &GradStore) -> Result<()> {
        self.t += 1;
        for (store, prefix) in stores {
            self.apply(store, grads, prefix)?;
        }
        Ok(())
    }

    fn apply(&mut self, store: &ParamStore, grads: &GradStore, prefix: &str) -> Result<()> {
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (short, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let name = format!("{prefix}{short}");
            let m = match self.m.get(&name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, t) in &self.m {
            out.push((format!("{prefix}m.{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            out.push((format!("{prefix}v.{k}"), t.clone()));
        }
        out
    }

    /// Restores moments saved by [`Adam::export`] and the step count.
    pub fn restore(&mut self, src: &HashMap<String, Tensor>, prefix: &str, t: u64) -> Result<()> {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (key, tensor) in src {
            let Some(rest) = key.strip_prefix(prefix) else {
                continue;
            };
            if let Some(name) = rest.strip_prefix("m.") {
                self.m.insert(name.to_string(), tensor.clone());
            } else if let Some(name) = rest.strip_prefix("v.") {
                self.v.insert(name.to_string(), tensor.clone());
            } else {
                return Err(PenError::Checkpoint(format!(
                    "unexpected optimizer tensor `{key}`"
                )));
            }
        }
        if self.m.len() != self.v.len() {
            return Err(PenError::Checkpoint(
                "optimizer moments are incomplete".into(),
            ));
        }
        Ok(())
    }
}
