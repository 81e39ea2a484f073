use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named learnable tensors plus their Adam state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Inserts a tensor drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Number of Adam updates applied to `name` so far.
    pub fn adam_steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.step)
    }

    /// One Adam update over exactly the parameters in `names`. A name
    /// without an entry in `grads` is updated with a zero gradient.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        names: &[String],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for name in names {
            let param = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            let zero;
            let grad = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(param.shape());
                    &zero
                }
            };
            if grad.shape() != param.shape() {
                return Err(Error::shape("adam_step", param.shape(), grad.shape()));
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
                step: 0,
            });
            mom.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(mom.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(mom.step as i32);
            let it = param
                .data_mut()
                .iter_mut()
                .zip(mom.m.data_mut().iter_mut())
                .zip(mom.v.data_mut().iter_mut())
                .zip(grad.data());
            for (((p, m), v), g) in it {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits of the selected parameters.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&d.to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
