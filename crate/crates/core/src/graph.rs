//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Values are computed eagerly as operations are pushed; `backward` replays
//! the tape in reverse, accumulating gradients in a fixed order so that two
//! replays of the same forward are bitwise identical.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradient callback: receives the node's output gradient and an accumulator
/// `sink(parent_index, contribution)`.
pub(crate) type BackFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) parents: Vec<usize>,
    pub(crate) backward: Option<BackFn>,
}

/// The recorded operation graph.
///
/// The seed identifies the tape for reproducibility bookkeeping and seeds any
/// randomized kernel an op may introduce; every op currently on the tape is
/// deterministic on its own.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, usize>,
    seed: u64,
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Add a non-differentiable input value.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(self.push_unchecked(value, vec![], None))
    }

    /// Add a leaf for a named parameter, deduplicated by name so that every
    /// use of a shared parameter hits the same storage and its gradient
    /// accumulates across all uses.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&idx) = self.param_nodes.get(name) {
            return Ok(Var(idx));
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let var = self.input(value.clone())?;
        self.param_nodes.insert(name.to_string(), var.0);
        Ok(var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn rc_value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Push an op result. Every op output must be finite; a violation is an
    /// error at the node that produced it, named for diagnosis.
    pub(crate) fn push(
        &mut self,
        op: &str,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackFn>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        Ok(self.push_unchecked(value, parents, backward))
    }

    fn push_unchecked(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackFn>,
    ) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Gradient accumulation visits nodes
    /// in strictly descending index order, so replaying is bitwise stable.
    pub fn backward(&self, root: Var) -> Result<BackwardPass> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].backward {
                let mut sink = |parent: usize, contribution: Tensor| {
                    debug_assert!(parent < i, "tape order violated");
                    match &mut grads[parent] {
                        Some(g) => g.add_assign(&contribution),
                        slot @ None => *slot = Some(contribution),
                    }
                };
                back(&grad, &mut sink);
            }
            grads[i] = Some(grad);
        }
        Ok(BackwardPass { grads })
    }

    /// Gradients of a scalar root with respect to every named parameter used
    /// by the graph.
    pub fn param_grads(&self, root: Var) -> Result<Gradients> {
        let pass = self.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, &idx) in &self.param_nodes {
            let g = pass
                .wrt(Var(idx))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape()));
            out.insert(name.clone(), g);
        }
        Ok(Gradients(out))
    }

    /// Names of parameters referenced so far, with their tape indices.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.param_nodes.keys().map(|s| s.as_str())
    }

    /// Parents of a node, exposing the recorded graph structure.
    pub fn parents(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].parents
    }
}

/// Result of one reverse sweep.
pub struct BackwardPass {
    grads: Vec<Option<Tensor>>,
}

impl BackwardPass {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Named gradients, ordered by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    /// Elementwise `self += other`, inserting entries that are new.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}
