//! Tape-based reverse-mode automatic differentiation over [`DenseArray`]s.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the tape is
//! topologically sorted by construction. [`Var::backward`] walks it once in
//! reverse and applies each recorded backward rule at most once.
//!
//! ```
//! use lintransfer::array::DenseArray;
//! use lintransfer::grad::Tape;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(DenseArray::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use check::{grad_check, GradCheck, RELATIVE_FLOOR};
pub use ops::{custom_grad, detach, ste_round};

/// Backward rule: given the output gradient and which inputs need a
/// gradient, return one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&DenseArray<T>, &[bool]) -> Vec<Option<DenseArray<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<DenseArray<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of a computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires a gradient and no backward rules
    /// are kept. Used for frozen-model evaluation.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn leaf(&self, value: DenseArray<T>, requires_grad: bool) -> Var<'_, T> {
        self.shared_leaf(Rc::new(value), requires_grad)
    }

    pub fn constant(&self, value: DenseArray<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Leaf backed by an existing shared array (no copy).
    pub fn shared_leaf(&self, value: Rc<DenseArray<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded operations that carry a backward rule.
    pub fn op_count(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.backward.is_some())
            .count()
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<DenseArray<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an operation. The backward rule is dropped when no input
    /// requires a gradient.
    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        inputs: &[usize],
        value: impl Into<Rc<DenseArray<T>>>,
        backward: F,
    ) -> Var<'_, T>
    where
        F: Fn(&DenseArray<T>, &[bool]) -> Vec<Option<DenseArray<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.requires_grad_of(i));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: value.into(),
            inputs: inputs.to_vec(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn backward_from(&self, root: usize, seed: DenseArray<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<DenseArray<T>>> = vec![None; root + 1];
        grads[root] = Some(seed);
        let mut invocations = 0;
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = rule(&g, &needs);
            invocations += 1;
            grads[id] = Some(g);
            if input_grads.len() != node.inputs.len() {
                return Err(Error::shape(
                    node.op,
                    format!(
                        "backward produced {} gradients for {} inputs",
                        input_grads.len(),
                        node.inputs.len()
                    ),
                ));
            }
            for ((&input, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(ig) = ig else { continue };
                if !need {
                    continue;
                }
                let want = nodes[input].value.shape();
                if ig.shape() != want {
                    return Err(Error::shape(
                        node.op,
                        format!(
                            "declared input shape {:?} but backward produced {:?}",
                            want,
                            ig.shape()
                        ),
                    ));
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads, invocations })
    }
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<DenseArray<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Reverse pass from a one-element output with unit seed.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let value = self.value();
        if value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must have one element, shape is {:?}", value.shape()),
            ));
        }
        self.tape
            .backward_from(self.id, DenseArray::ones(value.shape()))
    }

    /// Reverse pass with an explicit output gradient.
    pub fn backward_with(&self, seed: DenseArray<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value().shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape()),
            ));
        }
        self.tape.backward_from(self.id, seed)
    }
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<DenseArray<T>>>,
    invocations: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `var`, if it was reached.
    pub fn get(&self, var: Var<'_, T>) -> Option<&DenseArray<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of the root with respect to `var`, zero-filled if it was not reached.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> DenseArray<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(&var.shape()))
    }

    /// How many backward rules ran.
    pub fn invocations(&self) -> usize {
        self.invocations
    }
}
