//! Named parameter storage and tape binding for model training.

use crate::autodiff::tape::{Gradients, NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Flat registry of model parameters. Frozen entries (e.g. the imaginary
/// eigenvalue bank of a real-diagonal model) participate in forward passes
/// but are skipped by the optimizer and by parameter counts.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.is_trainable(*id)).collect()
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }
}

/// One forward pass: a fresh tape plus lazy bindings from parameters to
/// leaf nodes. Constants (inputs, masks, targets) enter as unbound leaves.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<NodeId>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { tape: Tape::new(), store, bound: vec![None; store.entries.len()] }
    }

    /// Leaf node for a parameter; bound once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let node = self.tape.leaf(self.store.tensor(id).clone());
        self.bound[id.0] = Some(node);
        node
    }

    /// Leaf node for a non-parameter value.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.tape.leaf(t)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.tape.backward(loss)
    }

    /// Gradient of the loss with respect to a parameter (zeros if the
    /// parameter was never bound or never used).
    pub fn param_grad(&self, grads: &Gradients, id: ParamId) -> Tensor {
        match self.bound[id.0] {
            Some(node) => grads.get(&self.tape, node),
            None => Tensor::zeros(self.store.tensor(id).shape()),
        }
    }
}
