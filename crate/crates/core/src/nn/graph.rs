//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape built during one forward pass. Every recorded op
//! stores a closure mapping the output gradient onto its parents' gradients.
//! Graphs are cheap and meant to be thrown away after each backward pass.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{Real, Tensor};

/// Maps the output gradient onto parent gradients; the flag slice says which
/// parents need one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn insert(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.insert(Node {
            value: Arc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        });
        Var { graph: self, id }
    }

    /// A shared constant; the tensor is not copied.
    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        let id = self.insert(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        });
        Var { graph: self, id }
    }

    /// A differentiable input (parameter or image being optimized).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.insert(Node {
            value: Arc::new(value),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        });
        Var { graph: self, id }
    }

    /// Record an op. The backward closure is dropped when no parent needs a
    /// gradient.
    pub fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let id = self.insert(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var { graph: self, id }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let seed = {
            let nodes = self.nodes.borrow();
            let v = &nodes[root.id].value;
            assert_eq!(v.numel(), 1, "backward root must be a scalar, got {:?}", v.shape());
            Tensor::full(v.shape(), T::one())
        };
        self.backward_with(root, seed)
    }

    /// Backpropagate an explicit output gradient (vector-Jacobian product).
    pub fn backward_with(&self, root: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), seed.shape(), "seed gradient shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let pgs = backward(&g, &needs);
            debug_assert_eq!(pgs.len(), node.parents.len());
            for (pg, &p) in pgs.into_iter().zip(&node.parents) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the leaves touched by a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of the given shape when it was unreachable.
    pub fn take_or_zeros(&mut self, v: Var<'_, T>) -> Tensor<T> {
        let shape = v.shape();
        self.take(v).unwrap_or_else(|| Tensor::zeros(&shape))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}
