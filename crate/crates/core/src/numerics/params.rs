use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

use super::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Named trainable tensors with matching gradient buffers and Adam state.
///
/// Iteration order is the lexicographic order of names, which keeps every
/// traversal (checkpointing, gradient checks, updates) deterministic.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or replaces) a parameter; its gradient and moments are zeroed.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let n = value.len();
        self.grads
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.moments.insert(
            name.clone(),
            Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            },
        );
        self.params.insert(name, value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.grads
            .get_mut(name)
            .ok_or_else(|| Error::MissingGradient(name.to_string()))
    }

    /// Drops a gradient buffer; the next `adam_step` reports it missing.
    pub fn remove_grad(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            exec::for_each_chunk_mut(g.data_mut(), 1 << 14, |_, c| c.fill(0.0));
        }
    }

    /// One bias-corrected Adam update over every parameter.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        for (name, p) in &self.params {
            match self.grads.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => {
                    return Err(Error::Shape(format!(
                        "gradient for `{}` has shape {:?}, parameter {:?}",
                        name,
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::MissingGradient(name.clone())),
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, p) in self.params.iter_mut() {
            let g = self.grads[name].data();
            let m = self.moments.get_mut(name).expect("moments track params");
            adam_update(p.data_mut(), g, &mut m.first, &mut m.second, lr, bc1, bc2);
        }
        Ok(())
    }
}

const ADAM_CHUNK: usize = 1 << 13;

fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            let gi = g[i];
            if gi == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                continue;
            }
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    };
    if p.len() < 2 * ADAM_CHUNK || exec::execution() == exec::Execution::Sequential {
        update(p, g, m, v);
        return;
    }
    // Elementwise update: chunking cannot change the result.
    let mut parts: Vec<(&mut [f64], &[f64], &mut [f64], &mut [f64])> = p
        .chunks_mut(ADAM_CHUNK)
        .zip(g.chunks(ADAM_CHUNK))
        .zip(m.chunks_mut(ADAM_CHUNK))
        .zip(v.chunks_mut(ADAM_CHUNK))
        .map(|(((p, g), m), v)| (p, g, m, v))
        .collect();
    exec::for_each_chunk_mut(&mut parts, 1, |_, c| {
        for (p, g, m, v) in c.iter_mut() {
            update(p, g, m, v);
        }
    });
}
