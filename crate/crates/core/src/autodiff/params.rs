use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A trainable tensor with its accumulated gradient and Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Array,
    pub grad: Array,
    pub m: Array,
    pub v: Array,
    pub t: u64,
}

impl Parameter {
    fn new(value: Array) -> Self {
        let zeros = Array::zeros(value.rows(), value.cols());
        Self { grad: zeros.clone(), m: zeros.clone(), v: zeros, value, t: 0 }
    }
}

/// Named parameters in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if value.rank() != 2 {
            return Err(Error::shape("parameter", format!("`{name}` must be rank 2, got {:?}", value.shape())));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of parameter `{name}`")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients of every trainable binding in `binder`.
    pub fn accumulate(&mut self, grads: &Gradients, binder: &Binder) {
        for (name, var) in &binder.trainable {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), grads.get(*var)) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// One Adam update of every parameter from its accumulated gradient,
    /// then clears the gradients. Nothing is modified if any gradient is
    /// non-finite.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        self.adam_step_filtered(lr, |_| true)
    }

    /// [`adam_step`](Self::adam_step) restricted to parameters accepted by `keep`;
    /// gradients of the others are cleared without an update.
    pub fn adam_step_filtered(&mut self, lr: f64, keep: impl Fn(&str) -> bool) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(n, p)| keep(n) && !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
        }
        for (name, p) in self.params.iter_mut() {
            if keep(name) {
                adam_update(p, lr);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }

    /// Copy of parameter values only (moments and gradients reset).
    pub fn snapshot(&self) -> Self {
        Self { params: self.params.iter().map(|(k, p)| (k.clone(), Parameter::new(p.value.clone()))).collect() }
    }

    /// True when every parameter value matches `other` bit for bit.
    pub fn values_bit_equal(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn adam_update(p: &mut Parameter, lr: f64) {
    p.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(p.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(p.t as i32);
    let (value, grad, m, v) = (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Tracks which graph leaves stand for which parameters of one store.
///
/// Trainable bindings are shared leaves whose gradients flow back to the
/// store; frozen bindings are constants.
#[derive(Debug, Default, Clone)]
pub struct Binder {
    trainable: BTreeMap<String, Var>,
    frozen: BTreeMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParameterStore, name: &str, trainable: bool) -> Result<Var> {
        let map = if trainable { &mut self.trainable } else { &mut self.frozen };
        if let Some(&v) = map.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = if trainable { g.param(value)? } else { g.constant(value)? };
        map.insert(name.to_string(), v);
        Ok(v)
    }

    /// Trainable leaf bound for `name`, if any.
    pub fn trainable_var(&self, name: &str) -> Option<Var> {
        self.trainable.get(name).copied()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var)> {
        self.trainable.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("x", Array::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_values_and_counts_step() {
        let mut s = scalar_store(1.5);
        s.adam_step(0.001).unwrap();
        let p = s.get("x").unwrap();
        assert_eq!(p.value.item(), 1.5);
        assert_eq!(p.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g| + ε).
        for g in [0.3, -2.0, 1e3] {
            let mut s = scalar_store(0.0);
            s.get_mut("x").unwrap().grad = Array::scalar(g);
            s.adam_step(0.01).unwrap();
            let expected = -0.01 * g / (g.abs() + ADAM_EPS);
            let got = s.get("x").unwrap().value.item();
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            assert_eq!(s.get("x").unwrap().grad.item(), 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        s.get_mut("x").unwrap().grad = Array::scalar(f64::NAN);
        let err = s.adam_step(0.01).unwrap_err().to_string();
        assert!(err.contains("`x`"), "{err}");
        assert_eq!(s.get("x").unwrap().value.item(), 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(0.0);
        assert!(s.insert("x", Array::scalar(1.0)).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = scalar_store(0.25);
            for k in 0..50 {
                let x = s.get("x").unwrap().value.item();
                s.get_mut("x").unwrap().grad = Array::scalar(2.0 * x + (k as f64).sin());
                s.adam_step(0.01).unwrap();
            }
            s
        };
        assert!(run().values_bit_equal(&run()));
    }
}
