use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Param {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named trainable parameters together with their Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub(crate) params: Vec<Param>,
    index: HashMap<String, ParamId>,
    pub(crate) step: u64,
    pub adam: AdamConfig,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
            adam: AdamConfig::default(),
        }
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let n = value.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        id
    }

    /// Register a parameter drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, shape, bound, rng)
    }

    /// Register a parameter drawn from `U(-bound, bound)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-bound..bound))
            .collect::<Vec<_>>();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One Adam update. Parameters without a gradient entry are left alone,
    /// moments included. Every gradient is validated before anything is written.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = self.params.get(i).ok_or_else(|| {
                Error::dim(format!("gradient for unknown parameter index {i}"))
            })?;
            if g.len() != p.value.len() {
                return Err(Error::dim(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::TrainingFault(format!(
                    "non-finite gradient {bad} for parameter {}",
                    p.name
                )));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            let Some(g) = g else { continue };
            let values = p.value.data_mut();
            for (((w, m), v), &gi) in values.iter_mut().zip(&mut p.m).zip(&mut p.v).zip(g) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Dense per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Add `values` into the entry for `id`.
    pub fn accumulate(&mut self, id: ParamId, values: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.iter_mut().zip(values).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(values.to_vec()),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value));
        (store, id)
    }

    #[test]
    fn zero_gradient_on_fresh_store_leaves_params() {
        let (mut store, id) = scalar_store(0.75);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[0.0]);
        store.adam_step(&grads, 1e-4).unwrap();
        assert_eq!(store.value(id).item(), 0.75);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
        let (mut store, id) = scalar_store(0.0);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[1.0]);
        store.adam_step(&grads, 1e-4).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut store, id) = scalar_store(1.0);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &[f64::NAN]);
        let err = store.adam_step(&grads, 1e-4).unwrap_err();
        assert!(err.to_string().contains("parameter w"), "{err}");
        assert_eq!(store.step(), 0);
        assert_eq!(store.value(id).item(), 1.0);
    }

    #[test]
    fn adam_is_a_pure_function_of_state() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.3, -0.2, 1.5]));
        let mut grads = Gradients::new(1);
        grads.accumulate(a, &[0.1, -2.0, 0.7]);
        let mut s1 = store.clone();
        let mut s2 = store.clone();
        for _ in 0..5 {
            s1.adam_step(&grads, 1e-3).unwrap();
            s2.adam_step(&grads, 1e-3).unwrap();
        }
        assert_eq!(s1, s2);
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(2.0));
        let mut grads = Gradients::new(2);
        grads.accumulate(a, &[1.0]);
        store.adam_step(&grads, 0.1).unwrap();
        assert!(store.value(a).item() < 1.0);
        assert_eq!(store.value(b).item(), 2.0);
        assert_eq!(store.moments(b), (&[0.0][..], &[0.0][..]));
    }
}
