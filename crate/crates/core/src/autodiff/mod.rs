//! Reverse-mode differentiation over an explicit operation graph.
//!
//! A [`Graph`] records every primitive applied during a forward pass.
//! Nodes hold immutable values; [`Graph::backward`] walks the record in
//! reverse and returns [`Gradients`] for every node that depends on a
//! trainable parameter or a gradient-requiring leaf. Frozen parameters and
//! constants never receive gradients, and work for them is skipped.

mod backward;
pub(crate) mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use kernels::{AttnDims, Broadcast};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Gelu,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub(crate) enum Reduce {
    Sum,
    Mean,
    MaskedMean { mask: Arc<[bool]>, counts: Vec<usize> },
    Max { argmax: Vec<usize> },
}

pub(crate) enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    MatMul { a: Var, b: Var, batched: bool },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Expand { x: Var, axis: usize, times: usize },
    Reduce { x: Var, axis: usize, kind: Reduce },
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Unary(Var, Unary),
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    BceWithLogits { logits: Var, targets: Arc<Tensor<T>> },
    Mse { pred: Var, target: Arc<Tensor<T>> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward pass. Parameters are read from the bound store.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    dropout_rng: RefCell<Option<ChaCha8Rng>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph without parameters; inputs are added as leaves.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            dropout_rng: RefCell::new(None),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), ..Self::new() }
    }

    /// Enables dropout, drawing masks from `rng`. Without this, dropout is the identity.
    pub fn with_dropout(self, rng: ChaCha8Rng) -> Self {
        *self.dropout_rng.borrow_mut() = Some(rng);
        self
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.borrow().is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    fn any_requires_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// An input that does not receive gradients.
    pub fn constant(&self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, requires_grad)
    }

    /// Binds a parameter of the attached store. Repeated calls return the same node,
    /// so a parameter used in several places accumulates one gradient.
    pub fn param(&self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return Ok(v);
        }
        let store = self.params.ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        if id.index() >= store.len() {
            return Err(Error::UnknownParameter(format!("#{}", id.index())));
        }
        let p = store.get(id);
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { value: Arc::clone(&p.value), op: Op::Param, requires_grad: p.trainable });
            Var(nodes.len() - 1)
        };
        self.bound.borrow_mut().insert(id, var);
        Ok(var)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        backward::run(self, loss)
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.get(*v))
    }

    /// Writes gradients into the store: every trainable parameter gets a gradient
    /// (zero if the loss does not depend on it); frozen ones get none.
    pub fn write_to(&self, store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            p.grad = if p.trainable {
                Some(self.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
            } else {
                None
            };
        }
    }

    /// Like [`Gradients::write_to`] but adds onto existing gradients.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let g = self.param(id).cloned();
            let p = store.get_mut(id);
            if !p.trainable {
                p.grad = None;
                continue;
            }
            let g = g.unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            match &mut p.grad {
                Some(acc) => acc.add_assign(&g),
                None => p.grad = Some(g),
            }
        }
    }
}
