//! Named parameter arrays with Adam state.

use std::collections::BTreeMap;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u32,
}

impl ParamEntry {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Error::check_len("parameter data", n, data.len())?;
        Ok(ParamEntry { shape, m: vec![0.0; n], v: vec![0.0; n], data, step: 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Parameters are stored as `f32`. Computation reads them widened to `f64`
/// and the optimizer rounds its result back, so a checkpoint holds exactly
/// the values training used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::arg(name, "duplicate parameter name"));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(shape, data)?);
        Ok(())
    }

    pub fn insert_entry(&mut self, name: &str, entry: ParamEntry) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::arg(name, "duplicate parameter name"));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn f64_array(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.data.iter().map(|&x| x as f64).collect())
    }

    pub fn f64_arrays(&self, names: &[String]) -> Result<Vec<Vec<f64>>> {
        names.iter().map(|n| self.f64_array(n)).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }
}

/// Bias-corrected Adam on every array that has a gradient. Arrays without an
/// entry in `grads` are left untouched, state included.
pub fn adam_step(store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let entry = store.get_mut(name)?;
        Error::check_len("adam gradient", entry.data.len(), g.len())?;
        entry.step += 1;
        let t = entry.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..g.len() {
            let m = cfg.beta1 * entry.m[i] as f64 + (1.0 - cfg.beta1) * g[i];
            let v = cfg.beta2 * entry.v[i] as f64 + (1.0 - cfg.beta2) * g[i] * g[i];
            entry.m[i] = m as f32;
            entry.v[i] = v as f32;
            let update = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            entry.data[i] = (entry.data[i] as f64 - update) as f32;
        }
    }
    Ok(())
}
