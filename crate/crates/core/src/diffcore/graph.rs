//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value and a closure that maps
//! the output gradient to gradients for its parents. [`Graph::backward`]
//! walks the tape once in reverse. Graphs are single-use: build one per
//! forward pass and drop it after the parameter gradients are harvested.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Maps the output gradient to one optional gradient per parent.
///
/// Arguments: output gradient, parent values, which parents need a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// A leaf bound to a stored parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.trainable, Some(id))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(backward) = &node.backward {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let parent_grads = backward(&grad, &parent_vals, &needs);
                for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let (Some(g), true) = (g, need) else { continue };
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
            }
            if node.requires_grad && node.backward.is_none() {
                grads[idx] = Some(grad);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (i, id)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(node, id) in &self.params {
            if let Some(Some(g)) = self.grads.get(node) {
                store.params[id.0].grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// A named learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered parameter registry. Insertion order is the canonical order used for
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a non-trainable buffer (e.g. running statistics).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}
