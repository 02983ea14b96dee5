//! Named parameters with trainable flags and gradients.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
}

/// Ordered collection of parameters, addressable by id or by dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value: Arc::new(value), trainable, grad: None });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape())));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                if !trainable {
                    p.grad = None;
                }
            }
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    trainable: p.trainable,
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Snapshot of the values of the given parameters.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Arc<Tensor<T>>> {
        ids.iter().map(|&id| Arc::clone(&self.params[id.0].value)).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], values: &[Arc<Tensor<T>>]) {
        for (&id, v) in ids.iter().zip(values) {
            self.params[id.0].value = Arc::clone(v);
        }
    }
}

/// Tensor of i.i.d. normal draws.
pub fn normal_tensor<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data = (0..len).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Uniform draws in `[-bound, bound]`.
pub fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
