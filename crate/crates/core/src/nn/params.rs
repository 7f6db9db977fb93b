use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Grads, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Buffers (running statistics) are saved but never optimised.
    pub trainable: bool,
}

/// Named parameters of one network plus their accumulated gradients.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    entries: Vec<ParamEntry>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let grad = Tensor::zeros(&value.shape);
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    /// Put parameter `i` on the tape.
    pub fn var(&self, g: &mut Graph, i: usize) -> Var {
        let e = &self.entries[i];
        g.param(self.id, i, e.value.clone(), e.trainable)
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Add this store's parameter gradients from a backward pass.
    pub fn accumulate(&mut self, g: &Graph, grads: &Grads) {
        for (var, idx) in g.param_nodes(self.id) {
            if let Some(t) = grads.get(var) {
                self.entries[idx].grad.add_assign(t);
            }
        }
    }

    /// All values flattened in entry order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            for v in &e.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load_blob(&mut self, bytes: &[u8]) -> Result<()> {
        let total: usize = self.entries.iter().map(|e| e.value.len()).sum();
        if bytes.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "parameter blob holds {} bytes, architecture needs {}",
                bytes.len(),
                total * 8
            )));
        }
        let mut chunks = bytes.chunks_exact(8);
        for e in &mut self.entries {
            for v in &mut e.value.data {
                let b = chunks.next().expect("length checked");
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.shape.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Init {
    /// He-normal with fan-in.
    Kaiming,
    /// `N(0, std)`.
    Normal(f64),
}

pub fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    let std = match init {
        Init::Kaiming => (2.0 / fan_in.max(1) as f64).sqrt(),
        Init::Normal(s) => s,
    };
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from accumulated gradients and clear them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.is_empty() {
            self.m = store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, e) in store.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..e.value.len() {
                let g = e.grad.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                e.value.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grad();
    }
}
