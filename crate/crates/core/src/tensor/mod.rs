//! Minimal reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! A [`Var`] is an immutable value plus an optional link to a [`Tape`]. Operations
//! on vars whose inputs are all constants produce constants and record nothing,
//! so inference code paths run with zero bookkeeping: parameters become constants
//! by simply not registering them on a tape.

mod conv;
mod norm;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use conv::{Conv1dSpec, Pad2d};
pub use norm::BatchStats;

/// Dense, dynamically shaped `f64` array used throughout the crate.
pub type Tensor = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Append-only record of differentiable operations.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let idx = self.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value: Rc::new(value),
            link: Some(Link {
                tape: self.clone(),
                idx,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Back-propagates from `root`, seeding it with ones.
    ///
    /// Interior gradients are released as soon as they have been pushed to their
    /// parents; only leaf gradients are retained.
    pub fn backward(&self, root: &Var) -> Gradients {
        let root_idx = match &root.link {
            Some(link) if link.tape.same(self) => link.idx,
            _ => return Gradients { grads: Vec::new() },
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root_idx] = Some(Tensor::ones(root.value.raw_dim()));
        for i in (0..=root_idx).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    match &mut grads[*p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[derive(Clone)]
struct Link {
    tape: Tape,
    idx: usize,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` if it did not influence the root.
    pub fn get(&self, leaf: &Var) -> Option<&Tensor> {
        let idx = leaf.link.as_ref()?.idx;
        self.grads.get(idx)?.as_ref()
    }

    /// Like [`Gradients::get`] but returns zeros shaped like the leaf when the
    /// leaf was unreachable.
    pub fn get_or_zeros(&self, leaf: &Var) -> Tensor {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.value.raw_dim()))
    }
}

/// A value in the computation, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    link: Option<Link>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("tracked", &self.requires_grad())
            .finish()
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Self {
            value: Rc::new(value),
            link: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::constant(Tensor::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch"))
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.link.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        Var {
            value: Rc::clone(&self.value),
            link: None,
        }
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on non-scalar of shape {:?}", self.shape());
        *self.value.iter().next().unwrap()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.link.as_ref().map(|l| &l.tape)
    }

    /// Builds the result of a custom operation.
    ///
    /// `backward` receives the output gradient and a mask telling which parents
    /// need a gradient; it must return one entry per parent, in order.
    pub fn from_op<F>(value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let tape = parents.iter().find_map(|p| p.link.as_ref().map(|l| l.tape.clone()));
        let Some(tape) = tape else {
            return Var::constant(value);
        };
        let parent_ids = parents
            .iter()
            .map(|p| match &p.link {
                Some(link) => {
                    assert!(link.tape.same(&tape), "operands recorded on different tapes");
                    Some(link.idx)
                }
                None => None,
            })
            .collect();
        let idx = tape.push(Node {
            parents: parent_ids,
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Rc::new(value),
            link: Some(Link { tape, idx }),
        }
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}
