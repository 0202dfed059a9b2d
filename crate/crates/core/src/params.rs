//! Named parameter storage, deterministic initialization and the Adam optimizer.

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Name of the initialization scheme, recorded in checkpoints.
pub const INIT_SCHEME: &str = "kaiming-uniform/chacha8-per-name";

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)` (He), for layers followed by ReLU/GLU.
    Kaiming { fan_in: usize },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    /// Uniform in `±bound`.
    Uniform(f64),
    Constant(f64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable parameter. Each parameter draws from its own stream
    /// keyed by `(seed, name)`, so the value of one parameter does not depend on
    /// which others exist.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
        let bound = match init {
            Init::Kaiming { fan_in } => (6.0 / fan_in.max(1) as f64).sqrt(),
            Init::Xavier { fan_in, fan_out } => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
            Init::Uniform(b) => b,
            Init::Constant(c) => {
                self.params.insert(name.to_string(), Tensor::full(shape, c));
                return;
            }
        };
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.params.insert(name.to_string(), Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Exponential moving update of batch-norm running statistics.
    pub fn update_running_stats(&mut self, prefix: &str, mean: &[f64], var: &[f64], momentum: f64) -> Result<()> {
        for (suffix, stat) in [("running_mean", mean), ("running_var", var)] {
            let key = format!("{prefix}.{suffix}");
            let buf = self
                .buffers
                .get_mut(&key)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {key}")))?;
            for (b, s) in buf.data_mut().iter_mut().zip(stat) {
                *b = (1.0 - momentum) * *b + momentum * s;
            }
        }
        Ok(())
    }
}

/// Binds a [`ParamStore`] to one forward pass on a [`Graph`].
///
/// Parameters become tape leaves lazily on first use. In `train` mode batch
/// normalization uses batch statistics and queues running-stat updates, which
/// the trainer applies after the optimizer step.
pub struct Session<'a> {
    pub graph: &'a Graph,
    store: &'a ParamStore,
    pub train: bool,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
    bn_updates: RefCell<Vec<(String, Vec<f64>, Vec<f64>)>>,
}

impl<'a> Session<'a> {
    /// Parameters are trainable leaves; BN uses batch statistics.
    pub fn training(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self::with_mode(graph, store, true, true)
    }

    /// Parameters are constants; BN uses running statistics.
    pub fn inference(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self::with_mode(graph, store, false, false)
    }

    pub fn with_mode(graph: &'a Graph, store: &'a ParamStore, train: bool, trainable: bool) -> Self {
        Self {
            graph,
            store,
            train,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
            bn_updates: RefCell::new(vec![]),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
            .clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for parameter `name` instead of the stored value.
    pub fn bind(&self, name: &str, v: Var) {
        self.vars.borrow_mut().insert(name.to_string(), v);
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.store
            .buffer(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer {name}")))
    }

    pub(crate) fn record_bn(&self, prefix: &str, mean: Vec<f64>, var: Vec<f64>) {
        self.bn_updates.borrow_mut().push((prefix.to_string(), mean, var));
    }

    pub fn take_bn_updates(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradients of every parameter touched in this session, by name.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor, &Tensor)> {
        self.m.iter().map(|(k, m)| (k, m, &self.v[k]))
    }

    pub(crate) fn set_moments(&mut self, name: &str, m: Tensor, v: Tensor) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }

    /// One bias-corrected Adam update of every parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let mut a = ParamStore::new();
        a.init("x", &[4, 4], Init::Kaiming { fan_in: 4 }, 7);
        let mut b = ParamStore::new();
        b.init("other", &[3], Init::Uniform(1.0), 7);
        b.init("x", &[4, 4], Init::Kaiming { fan_in: 4 }, 7);
        assert_eq!(a.get("x"), b.get("x"));
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(a.get("x").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = Graph::new();
            let s = Session::training(&g, &store);
            let w = s.p("w").unwrap();
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum_all(sq);
            let mut grads = g.backward(loss);
            let named = s.collect_grads(&mut grads);
            drop(s);
            opt.step(&mut store, &named).unwrap();
        }
        assert!(store.get("w").unwrap().norm() < 1e-2);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = Adam::new(1e-3);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[1], vec![5.0]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("w").unwrap().item() - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
