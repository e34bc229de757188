//! Named parameter storage with ADAM state.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Gradients, Tape, Tensor, Value};

/// ADAM hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Param {
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Map from name to parameter tensor plus per-parameter ADAM moments.
/// The step count is shared across all parameters of the store.
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Tape handles for one store's parameters, produced by [`ParamStore::bind`].
pub struct Bindings {
    map: BTreeMap<String, Value>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Value> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn merge(&mut self, other: Bindings) {
        self.map.extend(other.map);
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let n = value.numel();
        self.params.insert(
            name.into(),
            Param {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|p| p.grad.as_deref())
    }

    /// Inject every parameter into `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.bind_impl(tape, true)
    }

    /// Inject every parameter as a constant; gradients will not flow into it.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        self.bind_impl(tape, false)
    }

    fn bind_impl(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let mut map = BTreeMap::new();
        for (name, p) in &self.params {
            map.insert(name.clone(), tape.leaf(p.value.clone(), trainable));
        }
        Bindings { map }
    }

    /// Add tape gradients into the store's grad slots.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Gradients) {
        for (name, p) in self.params.iter_mut() {
            if let Some(&v) = bindings.map.get(name) {
                if let Some(g) = grads.get(v) {
                    let slot = p.grad.get_or_insert_with(|| vec![0.0; p.value.numel()]);
                    for (s, gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One bias-corrected ADAM update over every parameter. Errors if any
    /// parameter is missing its gradient; gradients are cleared afterward.
    pub fn adam_step(&mut self, lr: f64, hp: AdamParams) -> Result<()> {
        for (name, p) in &self.params {
            if p.grad.is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
            debug_assert_eq!(p.grad.as_ref().unwrap().len(), p.value.numel());
        }
        self.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.step as i32);
        for p in self.params.values_mut() {
            let g = p.grad.take().unwrap();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                p.m[i] = hp.beta1 * p.m[i] + (1.0 - hp.beta1) * g[i];
                p.v[i] = hp.beta2 * p.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }

    /// Export (name, tensor) pairs in deterministic name order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, p)| (n.as_str(), &p.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let w = b.get("w").unwrap();
        // loss = w  =>  grad = 1
        let loss = tape.scale(w, 1.0);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&b, &grads);
        store.adam_step(0.1, AdamParams::default()).unwrap();
        let w = store.get("w").unwrap().item();
        // m_hat = v_hat = 1 after bias correction: step is -lr / (1 + eps).
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        assert!(matches!(
            store.adam_step(0.1, AdamParams::default()),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.5));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let w = b.get("w").unwrap();
        let loss = tape.scale(w, 0.0);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&b, &grads);
        store.adam_step(0.1, AdamParams::default()).unwrap();
        assert_eq!(store.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn constant_grad_decreases_monotonically() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(0.0));
        let mut history = vec![0.0];
        for _ in 0..2 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let w = b.get("w").unwrap();
            let loss = tape.scale(w, 1.0);
            let grads = tape.backward(loss).unwrap();
            store.accumulate(&b, &grads);
            store.adam_step(0.1, AdamParams::default()).unwrap();
            history.push(store.get("w").unwrap().item());
        }
        assert!(history[1] < history[0]);
        assert!(history[2] < history[1]);
    }
}
