//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every value is a row-major `Vec<f64>` plus a shape. Ops build a dynamic
//! computation graph; [`backward`] walks it in reverse topological order and
//! accumulates gradients into the leaves. All kernels are plain sequential
//! loops, so identical inputs produce bit-identical outputs across runs.
//!
//! Any op whose output contains a NaN or Inf returns [`TensorError::NonFinite`]
//! instead of propagating the value silently.

mod ops;
mod store;

pub mod gradcheck;

pub use ops::{concat_cols, concat_rows};
pub use store::ParameterStore;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("parameter store: {0}")]
    Store(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient callback: reads the output node's grad (and data where needed)
/// and accumulates into the parents.
type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense tensor handle. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_node(node: Node) -> Tensor {
        Tensor { node: Rc::new(node) }
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Node {
        Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }
    }

    /// A constant (non-trainable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len(), "new")?;
        Ok(Tensor::from_node(Self::leaf(shape.to_vec(), data, false)))
    }

    /// A trainable leaf: gradients accumulate here during [`backward`].
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len(), "parameter")?;
        Ok(Tensor::from_node(Self::leaf(shape.to_vec(), data, true)))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_node(Self::leaf(shape.to_vec(), vec![0.0; n], false))
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_node(Self::leaf(shape.to_vec(), vec![value; n], false))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[1], value)
    }

    /// A 2-D constant built from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(TensorError::InvalidArgument {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(&[nrows, ncols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.node.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.node.shape[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow the underlying values.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.node.data.borrow()[idx]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "item",
                detail: format!("expected 1 element, got {}", self.numel()),
            });
        }
        Ok(self.node.data.borrow()[0])
    }

    /// Current gradient buffer, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place (used by optimizers). Graphs built
    /// from the old values are stale after this call.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} values, got {}", self.numel(), data.len()),
            });
        }
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    /// Overwrite a single value in place.
    pub fn set_value(&self, idx: usize, value: f64) {
        self.node.data.borrow_mut()[idx] = value;
    }

    /// A constant copy that no gradient flows through.
    pub fn detach(&self) -> Tensor {
        Tensor::from_node(Self::leaf(self.node.shape.clone(), self.to_vec(), false))
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Ensure a gradient buffer exists (zeros if the leaf was unreachable).
    fn ensure_grad(&self) {
        let mut slot = self.node.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![0.0; self.numel()]);
        }
    }

    /// Build an op node. `requires_grad` is inherited from the parents; the
    /// backward callback is dropped when no parent is trainable.
    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        }))
    }
}

fn check_shape(shape: &[usize], len: usize, op: &'static str) -> Result<()> {
    let expect: usize = shape.iter().product();
    if expect != len {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("shape {shape:?} holds {expect} values, got {len}"),
        });
    }
    Ok(())
}

/// Reverse topological order of the graph rooted at `root` (parents first).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    // Iterative DFS with an explicit post-order stage so deep graphs cannot
    // overflow the call stack.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.node.id) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in &t.node.parents {
            if !visited.contains(&p.node.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Populate gradients of every trainable leaf reachable from `loss`, then
/// make sure each parameter in `params` has a gradient buffer (zeros when the
/// parameter does not influence the loss). Gradients accumulate across calls;
/// zero them explicitly between steps.
pub fn backward(loss: &Tensor, params: &ParameterStore) -> Result<()> {
    backward_graph(loss)?;
    for (_, p) in params.iter() {
        p.ensure_grad();
    }
    Ok(())
}

/// Run the reverse pass only (no parameter-store bookkeeping).
pub fn backward_graph(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss { numel: loss.numel() });
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    loss.accumulate_grad(&[1.0]);
    let order = topo_order(loss);
    for t in order.iter().rev() {
        if !t.node.requires_grad {
            continue;
        }
        let Some(backward) = &t.node.backward else { continue };
        let grad = t.node.grad.borrow();
        let Some(grad) = grad.as_ref() else { continue };
        let data = t.node.data.borrow();
        backward(grad, &data, &t.node.parents);
    }
    // Interior grads are only scratch space for the walk above; free them so
    // repeated backward calls accumulate in leaves alone.
    for t in order.iter() {
        if t.node.backward.is_some() {
            *t.node.grad.borrow_mut() = None;
        }
    }
    Ok(())
}
