//! Named parameter storage and graph binding.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named tensors. Insertion order is stable and is the
/// order in which parameters are saved and updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. `decay` marks whether weight decay applies to it.
    pub fn insert(&mut self, name: &str, tensor: Tensor, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor.requiring_grad());
        self.decay.push(decay);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Index(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.tensor(self.id(name)?))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces the data of an existing parameter, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: &Tensor) -> Result<()> {
        let id = self.id(name)?;
        let t = &mut self.tensors[id.0];
        if t.shape() != data.shape() {
            return Err(Error::shape(t.shape(), data.shape(), name));
        }
        t.data_mut().copy_from_slice(data.data());
        Ok(())
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, Tensor::new(shape.to_vec(), vec![value; n])?, false)
    }
}

/// Lazily maps parameters to graph leaves for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Binding {
    vars: HashMap<ParamId, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        *self.vars.entry(id).or_insert_with(|| {
            let t = store.tensor(id);
            g.param(t.shape().to_vec(), t.data().to_vec())
        })
    }

    /// Binds a parameter to an existing graph node (e.g. a gradient-check input).
    pub fn insert(&mut self, id: ParamId, var: Var) {
        self.vars.insert(id, var);
    }

    pub fn named(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.var(g, store, id))
    }

    /// Adds graph gradients into each bound parameter's gradient buffer.
    pub fn accumulate_grads(&self, g: &Graph, store: &mut ParamStore) {
        let mut bound: Vec<_> = self.vars.iter().collect();
        bound.sort_by_key(|(id, _)| **id);
        for (id, var) in bound {
            if let Some(grad) = g.grad(*var) {
                store.tensor_mut(*id).accumulate_grad(grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.init_const("a", &[2], 1.0).unwrap();
        assert!(s.init_const("a", &[2], 1.0).is_err());
        assert!(s.get("a").unwrap().requires_grad());
    }

    #[test]
    fn binding_writes_grads() {
        let mut s = ParamStore::new();
        s.init_const("w", &[3], 2.0).unwrap();
        let mut g = Graph::new();
        let mut b = Binding::new();
        let w = b.named(&mut g, &s, "w").unwrap();
        let w2 = b.named(&mut g, &s, "w").unwrap();
        assert_eq!(w, w2);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        b.accumulate_grads(&g, &mut s);
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[4.0; 3]);
    }
}
