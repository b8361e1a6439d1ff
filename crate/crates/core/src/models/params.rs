//! Named parameter storage.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::tensor::Scalar;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type ParamId = usize;

/// Prefix for non-trainable buffers (normalisation statistics). The optimizer
/// skips them; checkpoints persist them like any other tensor.
pub const BUFFER_PREFIX: &str = "norm.";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal(0, std) truncated at ±2 std.
    TruncNormal(f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            names: Vec::new(),
            index: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.tensors[id].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.names[id].starts_with(BUFFER_PREFIX)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += other` elementwise; layouts must match.
    pub fn accumulate(&mut self, other: &ParameterSet<T>) {
        assert_eq!(self.names, other.names, "accumulate: layout mismatch");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn same_layout(&self, other: &ParameterSet<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::from_f64c(v.to_f64c())).collect(),
                })
                .collect(),
        }
    }

    /// Copy values of every tensor that also exists in `src` with the same shape.
    pub fn copy_matching(&mut self, src: &ParameterSet<T>, prefix_map: impl Fn(&str) -> String) {
        for i in 0..self.len() {
            let name = prefix_map(&self.names[i]);
            if let Some(t) = src.by_name(&name) {
                if t.shape == self.tensors[i].shape {
                    self.tensors[i].data.copy_from_slice(&t.data);
                }
            }
        }
    }
}

/// Registers parameters while a model layout is being built.
pub struct Builder<'a, T> {
    pub params: ParameterSet<T>,
    rng: &'a mut Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(rng: &'a mut Rng) -> Self {
        Builder {
            params: ParameterSet::new(),
            rng,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut t = Tensor::zeros(shape);
        if let Init::TruncNormal(std) = init {
            for v in &mut t.data {
                let z = loop {
                    let z: f64 = self.rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z;
                    }
                };
                *v = T::from_f64c(z * std);
            }
        }
        self.params
            .insert(name, t)
            .unwrap_or_else(|e| panic!("model layout bug: {e}"))
    }

    pub fn finish(self) -> ParameterSet<T> {
        self.params
    }
}
