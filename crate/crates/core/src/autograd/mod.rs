//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] owns its value and, when any input requires a gradient, links
//! to its parents together with a backward closure. Values produced purely
//! from constants keep no parents, so inference passes free intermediates
//! as soon as they go out of scope.

mod ops;

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use ops::*;

use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub(crate) struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Var<T> {
    fn new(value: Tensor<T>, requires_grad: bool, parents: Vec<Var<T>>, backward: Option<BackwardFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::new(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is collected by [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::new(value, true, Vec::new(), None)
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::new(value, true, parents, Some(backward))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Takes the value out when this is the only handle, cloning otherwise.
    pub fn into_value(self) -> Tensor<T> {
        match Rc::try_unwrap(self.0) {
            Ok(node) => node.value,
            Err(rc) => rc.value.clone(),
        }
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> T {
        assert_eq!(self.0.value.numel(), 1, "item() on a non-scalar");
        self.0.value.data()[0]
    }

    /// Backpropagates a gradient of ones from this variable and returns
    /// the gradients of every reachable leaf.
    pub fn backward(&self) -> Gradients<T> {
        let order = self.topological_order();
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), Tensor::full(self.shape().to_vec(), T::one()));
        let mut leaves = HashMap::new();
        for var in order.iter().rev() {
            let node = &var.0;
            let Some(grad) = grads.remove(&node.id) else {
                continue;
            };
            let Some(backward) = node.backward.as_ref() else {
                leaves.insert(node.id, grad);
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.parents.iter().map(|p| p.value()).collect(),
                output: &node.value,
                needs: node.parents.iter().map(Var::requires_grad).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pg), true) = (pg, parent.requires_grad()) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), parent.shape());
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }

    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !var.requires_grad() || !visited.insert(var.id()) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Gradients of leaf variables, keyed by variable id.
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    pub fn remove(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id())
    }
}

#[cfg(test)]
mod tests;
