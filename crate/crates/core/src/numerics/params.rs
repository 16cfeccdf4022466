use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a tensor drawn uniformly from `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data))
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
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .find(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))?;
            let dst = &mut self.tensors[i];
            if src.shape() != dst.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.insert_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.insert_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.affine(x, w, b)
    }
}
