//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable op records a node holding its inputs. Node ids grow
//! monotonically, so sorting reachable nodes by id gives a valid tape order
//! (inputs always precede the ops that consume them). Backward passes are
//! themselves written with differentiable ops, which makes a second,
//! graph-building pass available for second-order meta-gradients.

mod autograd;
pub mod gradcheck;
pub mod init;
mod ops;
pub mod optim;
mod params;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{contract_err, dim_err, Result};

pub use autograd::grad;
pub use optim::{sgd_step, SgdState};
pub use params::{GradMap, ModelParams};

pub(crate) use autograd::Op;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether ops executed on this thread are recorded for differentiation.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous recording mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disable recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Cheaply clonable handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("data", &preview)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero dimension"));
        }
        if numel(shape) != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Tensor::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::new(data, shape)?.into_leaf(true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![v], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::build(vec![1.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::build(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return dim_err("ragged rows");
        }
        Tensor::new(rows.concat(), &[r, c])
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Tensor::build(data, shape, true, Some(Node { op, inputs }))
        } else {
            Tensor::build(data, shape, false, None)
        }
    }

    fn into_leaf(self, requires_grad: bool) -> Tensor {
        match Arc::try_unwrap(self.0) {
            Ok(inner) => Tensor::build(inner.data, inner.shape, requires_grad, None),
            Err(shared) => Tensor::build(shared.data.clone(), shared.shape.clone(), requires_grad, None),
        }
    }

    /// Fresh leaf with the same values; optionally tracked.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub fn detach_leaf(&self) -> Tensor {
        Tensor::build(self.0.data.clone(), self.0.shape.clone(), true, None)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Row and column counts of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let cols = self.0.shape[1];
        self.0.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.0.shape.last().unwrap_or(&1);
        &self.0.data[r * cols..(r + 1) * cols]
    }

    /// Accumulated gradient, if `backward` has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from this scalar into every reachable tracked leaf.
    pub fn backward(&self) -> Result<()> {
        if numel(self.shape()) != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return contract_err("loss is not connected to any tracked tensor");
        }
        autograd::backward_into_leaves(self)
    }
}
