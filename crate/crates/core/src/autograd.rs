//! Reverse-mode differentiation over a dynamically built graph.
//!
//! Every op returns a [`Var`] holding its value plus, when gradients are
//! enabled and some input requires them, the inputs and a closure that maps
//! the output gradient to input gradients. Graphs are freed when the last
//! handle is dropped; under [`no_grad`] intermediates are never linked, so
//! inference keeps only live tensors.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Maps (output grad, output value, parents, which parents need grads) to
/// per-parent gradient buffers. `None` entries are skipped.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &Tensor<T>, &[Var<T>], &[bool]) -> Vec<Option<Vec<T>>>>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` without recording any graph edges.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    grad: RefCell<Option<Vec<T>>>,
}

/// Handle to a value in the differentiation graph.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Var<T> {
    fn make(
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents,
            backward,
            grad: RefCell::new(None),
        }))
    }

    /// Value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Vec::new(), None)
    }

    /// Gradient-bearing leaf (parameter or differentiated input).
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, Vec::new(), None)
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if grad_enabled() && parents.iter().any(Var::requires_grad) {
            Self::make(value, true, parents, Some(backward))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.0.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Accumulated gradient, if any reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::new(self.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient or zeros when nothing flowed here.
    pub fn grad_or_zeros(&self) -> Tensor<T> {
        self.grad().unwrap_or_else(|| Tensor::zeros(self.shape()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate(&self, g: Vec<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Propagates d(self)/d(·) to every reachable gradient-bearing node.
    /// Leaves keep (and accumulate) their gradients; intermediate buffers
    /// are released once consumed.
    pub fn backward(&self) -> Result<()> {
        if self.0.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate(vec![T::one()]);
        for var in order.iter().rev() {
            let node = &var.0;
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = node.grad.borrow_mut().take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Var::requires_grad).collect();
            let grads = bw(&grad, &node.value, &node.parents, &needs);
            debug_assert_eq!(grads.len(), node.parents.len());
            for ((parent, g), need) in node.parents.iter().zip(grads).zip(needs) {
                if let (Some(g), true) = (g, need) {
                    debug_assert_eq!(g.len(), parent.value().len());
                    parent.accumulate(g);
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(var.id()) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in var.0.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
