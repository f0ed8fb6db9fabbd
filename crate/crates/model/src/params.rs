//! Named parameter tensors, initialization and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameters in registration order; names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, m: Mat) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(m);
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|m| m.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamBuilder<'_> {
    /// Glorot-uniform `fan_in × fan_out` weight.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-limit..limit)).collect();
        self.store.insert(name, Mat::from_vec(fan_in, fan_out, data))
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store.insert(name, Mat::from_vec(rows, cols, data))
    }

    pub fn filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.insert(name, Mat::from_vec(rows, cols, vec![value; rows * cols]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, m)| vec![0.0; m.data.len()]).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            for k in 0..g.data.len() {
                let gk = g.data[k];
                self.m[i][k] = c.beta1 * self.m[i][k] + (1.0 - c.beta1) * gk;
                self.v[i][k] = c.beta2 * self.v[i][k] + (1.0 - c.beta2) * gk * gk;
                let mh = self.m[i][k] / bc1;
                let vh = self.v[i][k] / bc2;
                p.data[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
