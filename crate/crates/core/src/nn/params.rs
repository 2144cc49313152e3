use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named parameter or buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub value: Vec<f64>,
    /// Buffers (running statistics, normalization constants) are not trainable.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Result<usize> {
        let n: usize = shape.iter().product();
        if value.len() != n {
            return Err(Error::shape("ParamStore::add", n, value.len()));
        }
        if self.id(name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            value,
            trainable,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn value(&self, id: usize) -> &[f64] {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Vec<f64> {
        &mut self.entries[id].value
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

/// Adam optimizer state for the trainable entries of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam step on every trainable entry.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.entries.len() || self.m.len() != store.entries.len() {
            return Err(Error::shape("adam_update", store.entries.len(), grads.len()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((e, g), m), v) in store.entries.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !e.trainable {
                continue;
            }
            if g.len() != e.value.len() {
                return Err(Error::shape("adam_update gradient", e.value.len(), g.len()));
            }
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                e.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain Adam update on a single vector, exposed for direct checks.
pub fn adam_update(state: &mut AdamState, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
    state.update(store, grads)
}
