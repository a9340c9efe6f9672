//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.by_name.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape.to_vec()))
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn accumulate(&mut self, grads: &GradSet) {
        for (id, g) in &grads.0 {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    /// Overwrites parameter values from `(name, tensor)` pairs. Every stored
    /// parameter must be present with a matching shape.
    pub fn load_values<'a>(
        &mut self,
        values: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.tensors.len()];
        for (name, t) in values {
            let Some(&i) = self.by_name.get(name) else {
                continue;
            };
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t.clone().with_grad();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing parameter `{}`",
                self.names[i]
            )));
        }
        Ok(())
    }
}

/// Gradients collected from one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct GradSet(pub Vec<(ParamId, Vec<f64>)>);

/// A view of a [`ParamStore`] on one tape. Each parameter becomes a leaf the
/// first time it is requested; later requests reuse the same node so that
/// gradients from every use accumulate.
pub struct Params<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Params<'s> {
    pub fn trainable(store: &'s ParamStore) -> Self {
        Params {
            store,
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants and receive no gradient.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Params {
            store,
            vars: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            tape.leaf(t)
        } else {
            tape.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn grads(&self, tape: &Tape) -> GradSet {
        GradSet(
            self.vars
                .iter()
                .enumerate()
                .filter_map(|(i, v)| {
                    v.and_then(|v| tape.grad(v))
                        .map(|g| (ParamId(i), g.to_vec()))
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reused_parameter_accumulates_through_one_leaf() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let mut params = Params::trainable(&store);
        let a = params.var(&mut tape, w);
        let b = params.var(&mut tape, w);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        let grads = params.grads(&tape);
        store.accumulate(&grads);
        assert_eq!(store.get(w).grad().unwrap(), &[6.0]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let mut params = Params::frozen(&store);
        let wv = params.var(&mut tape, w);
        let y = tape.mul(x, wv).unwrap();
        tape.backward(y).unwrap();
        assert!(params.grads(&tape).0.is_empty());
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::ones([2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::ones([3]));
        assert!(a.load_values(b.iter()).is_err());
        let empty = ParamStore::new();
        assert!(a.load_values(empty.iter()).is_err());
    }
}
