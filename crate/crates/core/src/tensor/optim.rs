use super::params::{GradBuffer, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-5,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Adam with a linear warmup ramp. Moments and bias-correction counters are
/// kept per parameter, so parameters that receive no gradient on a call are
/// left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    updates: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let first = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        let second = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            config,
            step: 0,
            first,
            second,
            updates: vec![0; store.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `base_lr * min(1, step / warmup)`.
    pub fn effective_lr(&self) -> f64 {
        let ramp = if self.config.warmup_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.config.warmup_steps as f64).min(1.0)
        };
        self.config.base_lr * ramp
    }

    /// Update and advance the step counter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<f64> {
        let lr = self.apply(store, grads)?;
        self.advance();
        Ok(lr)
    }

    /// Update the parameters present in `grads` at the current step's learning
    /// rate without advancing the schedule.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<f64> {
        for (id, g) in grads.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = self.effective_lr();
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        for (id, g) in grads.iter() {
            let i = id.index();
            self.updates[i] += 1;
            let t = self.updates[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g[j] * clip;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Moments as named records (`adam.m.<param>`, `adam.v.<param>`) plus counters.
    pub fn to_records(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len() + 1);
        for id in store.ids() {
            let shape = store.value(id).shape().to_vec();
            let name = store.name(id);
            out.push((
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), self.first[id.index()].clone()).expect("shape"),
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor::new(shape, self.second[id.index()].clone()).expect("shape"),
            ));
        }
        let mut counters = vec![self.step as f64];
        counters.extend(self.updates.iter().map(|&u| u as f64));
        out.push(("adam.counters".to_string(), Tensor::row(counters)));
        out
    }

    pub fn load_records(&mut self, store: &ParamStore, records: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in records {
            if name == "adam.counters" {
                let d = t.data();
                if d.len() != self.updates.len() + 1 {
                    return Err(Error::config("optimizer counter length mismatch"));
                }
                self.step = d[0] as u64;
                for (u, &v) in self.updates.iter_mut().zip(&d[1..]) {
                    *u = v as u64;
                }
                continue;
            }
            let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                (&mut self.first, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (&mut self.second, p)
            } else {
                return Err(Error::config(format!("unexpected optimizer record `{name}`")));
            };
            let id = store
                .id(pname)
                .ok_or_else(|| Error::config(format!("optimizer record for unknown `{pname}`")))?;
            if t.len() != slot[id.index()].len() {
                return Err(Error::config(format!("optimizer record `{name}` has wrong size")));
            }
            slot[id.index()] = t.into_data();
        }
        Ok(())
    }
}
