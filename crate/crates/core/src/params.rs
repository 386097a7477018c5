//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every entry of `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(k, v.clone());
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Binds `name` into the graph. Panics if the parameter does not exist,
    /// which is a construction bug rather than a data error.
    pub fn bind(&self, g: &mut Graph, name: &str, trainable: bool) -> Var {
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was never initialized"));
        g.param(name, value, trainable)
    }

    /// Errors unless every name in `expected` is present; names outside
    /// `expected` are rejected unless `allow_unknown`.
    pub fn check_names<'a>(
        &self,
        expected: impl IntoIterator<Item = &'a str>,
        allow_unknown: bool,
    ) -> Result<()> {
        let expected: Vec<&str> = expected.into_iter().collect();
        if let Some(missing) = expected.iter().find(|n| !self.contains(n)) {
            return Err(Error::MissingParam(missing.to_string()));
        }
        if !allow_unknown {
            if let Some(extra) = self.names().find(|n| !expected.contains(n)) {
                return Err(Error::UnknownParam(extra.to_string()));
            }
        }
        Ok(())
    }

    /// Every value rounded to `f32`, the checkpoint storage precision.
    pub fn rounded_to_f32(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| x as f32 as f64)))
                .collect(),
        }
    }
}

/// `rows × cols` draws from `N(0, std²)`.
pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: HashMap<String, i32>,
    first: HashMap<String, Array2<f64>>,
    second: HashMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            steps: HashMap::new(),
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    /// Updates every parameter bound in `g` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, g: &Graph, grads: &Gradients) {
        for (name, var) in g.bound_params() {
            if let Some(grad) = grads.get(var) {
                self.update(store, name, grad);
            }
        }
    }

    fn update(&mut self, store: &mut ParamStore, name: &str, grad: &Array2<f64>) {
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let param = store
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        let g = grad + &(param.mapv(|p| p * weight_decay));
        let t = self.steps.entry(name.to_string()).or_insert(0);
        *t += 1;
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(g.dim()));
        m.zip_mut_with(&g, |m, g| *m = beta1 * *m + (1.0 - beta1) * g);
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(g.dim()));
        v.zip_mut_with(&g, |v, g| *v = beta2 * *v + (1.0 - beta2) * g * g);
        let c1 = 1.0 - beta1.powi(*t);
        let c2 = 1.0 - beta2.powi(*t);
        ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, m, v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", array![[3.0, -2.0]]);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = store.bind(&mut g, "x", true);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            adam.step(&mut store, &g, &grads);
        }
        assert!(store.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a", array![[1.0]]);
        store.insert("b", array![[1.0]]);
        let mut adam = Adam::new(AdamConfig::default());
        let mut g = Graph::new();
        let a = store.bind(&mut g, "a", true);
        let b = store.bind(&mut g, "b", false);
        let p = g.mul(a, b);
        let loss = g.sum(p);
        let grads = g.backward(loss);
        adam.step(&mut store, &g, &grads);
        assert_ne!(store.get("a").unwrap()[[0, 0]], 1.0);
        assert_eq!(store.get("b").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn name_checks() {
        let mut store = ParamStore::new();
        store.insert("a", array![[1.0]]);
        store.insert("z", array![[1.0]]);
        assert!(matches!(store.check_names(["a", "b"], true), Err(Error::MissingParam(_))));
        assert!(matches!(store.check_names(["a"], false), Err(Error::UnknownParam(_))));
        assert!(store.check_names(["a"], true).is_ok());
    }
}
