//! Reverse-mode gradient tape.
//!
//! Every differentiable op appends one node holding its parent ids and a
//! backward closure over the activations it saved. `backward` walks the nodes
//! in exact reverse insertion order, so the accumulation order of every
//! gradient is fixed by the forward program.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::array::{Float, Tensor};
use super::TensorError;

/// `(output gradient, output value, parent needs-grad flags)` → gradients of
/// each parent (`None` when the parent does not need one).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    output: Option<Arc<Tensor<T>>>,
}

pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that records nothing; every op result is a constant.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is requested by `backward`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        if !self.grad_enabled {
            return Var { tape: self, id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), backward: None, output: None });
        Var { tape: self, id: Some(nodes.len() - 1), value }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, id: None, value: Arc::new(value) }
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        Var { tape: self, id: None, value }
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn record<'t, F>(&'t self, value: Tensor<T>, parents: &[&Var<'t, T>], backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let value = Arc::new(value);
        let tracked = self.grad_enabled && parents.iter().any(|p| p.id.is_some());
        if !tracked {
            return Var { tape: self, id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
            output: Some(value.clone()),
        });
        Var { tape: self, id: Some(nodes.len() - 1), value }
    }

    /// Gradients of a scalar `loss` with respect to every tracked leaf.
    ///
    /// Calling this twice on the same tape yields the same gradients again;
    /// accumulation across calls is the caller's choice
    /// ([`Gradients::accumulate`]).
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        if loss.value.len() != 1 {
            return Err(TensorError::NotScalar(loss.value.shape().to_vec()));
        }
        let root = loss.id.ok_or(TensorError::DetachedLoss)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                leaves.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let output = node.output.as_ref().expect("op nodes keep their output");
            let parent_grads = backward(&g, output, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else {
                    continue;
                };
                match &mut grads[*pid] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), pg.shape());
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by one `backward` call.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.leaves.get(&id))
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: &Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }

    /// Adds the gradient of `v` into `acc`.
    pub fn accumulate(&self, v: &Var<'_, T>, acc: &mut Tensor<T>) {
        assert_eq!(acc.shape(), v.shape());
        if let Some(g) = self.get(v) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

/// A value on a tape. Tracked vars carry a node id; constants do not.
pub struct Var<'t, T: Float> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: Option<usize>,
    pub(crate) value: Arc<Tensor<T>>,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        Var { tape: self.tape, id: self.id, value: self.value.clone() }
    }
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value.shape()).finish()
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var { tape: self.tape, id: None, value: self.value.clone() }
    }
}
