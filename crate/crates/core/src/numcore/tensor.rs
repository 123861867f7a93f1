//! Reverse-mode autodiff over a dynamically built acyclic operator graph.
//!
//! A `Tensor` is a shared handle to a node holding row-major `f64` data,
//! an optional gradient buffer, and a recorded backward closure. Calling
//! [`backward`] on a scalar loss walks the graph in reverse topological
//! order and accumulates `d loss / d node` into every node that requires
//! gradients. Gradients accumulate across calls until explicitly zeroed.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::NumError;

thread_local! {
    static NEXT_ID: Cell<u64> = Cell::new(0);
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Upstream gradient in, accumulation into parents as a side effect.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub parents: Vec<Tensor>,
    pub backward: Option<BackwardFn>,
}

/// Shared handle to a graph node. Cloning is cheap (reference count bump).
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            inner.id, inner.shape, inner.requires_grad
        )
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor data");
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Leaf parameter: participates in gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        t.inner.borrow_mut().requires_grad = true;
        t
    }

    pub(crate) fn from_op(
        shape: &[usize],
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite op output");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let t = Tensor::from_vec(shape, data);
        {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = requires_grad;
            if requires_grad {
                inner.parents = parents;
                inner.backward = Some(backward);
            }
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place (used by the optimizer).
    pub fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        assert_eq!(inner.data.len(), g.len(), "gradient length mismatch");
        match inner.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.shape(), self.data())
    }
}

/// Reverse-mode sweep from a scalar loss.
pub fn backward(loss: &Tensor) -> Result<(), NumError> {
    if loss.len() != 1 {
        return Err(NumError::NotScalar { len: loss.len() });
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let order = topo_order(loss)?;
    loss.accum_grad(&[1.0]);
    for node in order.iter().rev() {
        let (grad, has_backward) = {
            let inner = node.inner.borrow();
            (inner.grad.clone(), inner.backward.is_some())
        };
        if let (Some(g), true) = (grad, has_backward) {
            let inner = node.inner.borrow();
            if let Some(f) = inner.backward.as_ref() {
                f(&g);
            }
        }
    }
    Ok(())
}

/// Post-order DFS; children of the loss (its parents) come before it.
fn topo_order(loss: &Tensor) -> Result<Vec<Tensor>, NumError> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut in_progress: HashSet<u64> = HashSet::new();
    // (node, next parent index to visit)
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    in_progress.insert(loss.id());
    while let Some((node, pi)) = stack.pop() {
        let parents: Vec<Tensor> = node.inner.borrow().parents.clone();
        if pi < parents.len() {
            let child = parents[pi].clone();
            stack.push((node, pi + 1));
            let cid = child.id();
            if !visited.contains(&cid) && child.requires_grad() {
                if in_progress.contains(&cid) {
                    return Err(NumError::GraphCycle);
                }
                in_progress.insert(cid);
                stack.push((child, 0));
            }
        } else {
            in_progress.remove(&node.id());
            visited.insert(node.id());
            order.push(node);
        }
    }
    Ok(order)
}
