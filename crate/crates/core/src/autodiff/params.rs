use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform initialization in `±bound`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(rows, cols, data).expect("shape"))
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
    }

    /// Overwrites tensors from a name-keyed map; every name must already exist
    /// with the same shape.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        if map.len() != self.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, model expects {}",
                map.len(),
                self.len()
            )));
        }
        for (name, t) in map {
            let id = self
                .id(name)
                .ok_or_else(|| Error::data(format!("unknown parameter {name} in checkpoint")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Graph leaves created for a [`ParamStore`], indexed by [`ParamId`].
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub(crate) fn new(vars: Vec<Var>) -> Self {
        ParamBinding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for ParamBinding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// One gradient tensor per parameter, aligned with the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(Vec<Tensor>);

impl Gradients {
    pub fn new(g: Vec<Tensor>) -> Self {
        Gradients(g)
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.0.iter()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }
}
