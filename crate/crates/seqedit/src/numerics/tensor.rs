//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a node in a dynamically built
//! computation graph. Operations in [`super::ops`] allocate fresh nodes and
//! register backward closures; [`Tensor::backward`] walks the graph in
//! reverse topological order and accumulates gradients into every tracked
//! leaf. Graphs are acyclic by construction (closures capture parent handles
//! and copied forward values, never the node they belong to), so dropping the
//! loss handle frees the whole graph.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type codes used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Float element of a [`Tensor`]: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + std::iter::Sum + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn append_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

struct OpRecord<T: Scalar> {
    parents: Vec<Tensor<T>>,
    /// Receives the upstream gradient of this node and accumulates
    /// contributions into (tracked) parents.
    backward: Box<dyn Fn(&[T])>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Option<OpRecord<T>>,
}

/// Shared handle to one node of the computation graph.
pub struct Tensor<T: Scalar> {
    node: Rc<RefCell<Node<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

thread_local! {
    static TAPE_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when operations record backward closures on this thread.
pub fn tape_enabled() -> bool {
    TAPE_ENABLED.with(|t| t.get())
}

/// Run `f` with gradient recording disabled (restored afterwards, even on
/// panic). Inference paths use this to avoid building graphs.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            TAPE_ENABLED.with(|t| t.set(self.0));
        }
    }
    let _restore = Restore(TAPE_ENABLED.with(|t| t.replace(false)));
    f()
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::InvalidShape {
                op: "from_vec",
                msg: format!("data length {} does not fit shape {:?}", data.len(), shape),
            });
        }
        Ok(Self::new_leaf(data, shape.to_vec()))
    }

    pub fn scalar(v: T) -> Self {
        Self::new_leaf(vec![v], vec![])
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new_leaf(data, vec![n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(data, &[rows, cols])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_leaf(vec![T::zero(); numel(shape)], shape.to_vec())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new_leaf(vec![v; numel(shape)], shape.to_vec())
    }

    fn new_leaf(data: Vec<T>, shape: Vec<usize>) -> Self {
        Tensor {
            node: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad: false,
                op: None,
            })),
        }
    }

    /// Allocate an op result. The backward closure must capture parent
    /// handles and any forward values it needs by value — never the handle of
    /// the node it belongs to.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let track = tape_enabled() && parents.iter().any(|p| p.tracked());
        let op = if track {
            Some(OpRecord {
                parents,
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Tensor {
            node: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad: false,
                op,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.node.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> Result<usize> {
        let node = self.node.borrow();
        if node.shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "rows",
                msg: format!("expected rank-2 tensor, got shape {:?}", node.shape),
            });
        }
        Ok(node.shape[0])
    }

    pub fn cols(&self) -> Result<usize> {
        let node = self.node.borrow();
        if node.shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "cols",
                msg: format!("expected rank-2 tensor, got shape {:?}", node.shape),
            });
        }
        Ok(node.shape[1])
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<T> {
        self.node.borrow().data.clone()
    }

    /// Borrow the forward value without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.node.borrow().data)
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<T> {
        let node = self.node.borrow();
        if node.data.len() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                msg: format!("expected one element, got shape {:?}", node.shape),
            });
        }
        Ok(node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    /// Mark a leaf as trainable (or freeze it with `false`).
    pub fn set_requires_grad(&self, requires: bool) {
        self.node.borrow_mut().requires_grad = requires;
    }

    pub fn as_param(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    /// A node participates in backpropagation if it is a trainable leaf or
    /// the result of a recorded operation.
    pub(crate) fn tracked(&self) -> bool {
        let node = self.node.borrow();
        node.requires_grad || node.op.is_some()
    }

    /// New leaf with a copy of this tensor's value and no history.
    pub fn detach(&self) -> Tensor<T> {
        let node = self.node.borrow();
        Self::new_leaf(node.data.clone(), node.shape.clone())
    }

    /// Overwrite the forward value in place (used by the optimizer and the
    /// finite-difference checker). Length must match.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let mut node = self.node.borrow_mut();
        if data.len() != node.data.len() {
            return Err(Error::InvalidShape {
                op: "set_data",
                msg: format!(
                    "length {} does not match existing shape {:?}",
                    data.len(),
                    node.shape
                ),
            });
        }
        node.data = data;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[T]) {
        let mut node = self.node.borrow_mut();
        debug_assert_eq!(node.data.len(), contrib.len());
        let len = node.data.len();
        let grad = node.grad.get_or_insert_with(|| vec![T::zero(); len]);
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g = *g + *c;
        }
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.node) as *const () as usize
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively; call [`Tensor::zero_grad`] on leaves between steps.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape()),
            });
        }
        // Post-order DFS: parents end up before children, so the reversed
        // order visits each node after all of its consumers.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let id = t.ptr_id();
            if !visited.insert(id) {
                continue;
            }
            stack.push((t.clone(), true));
            let node = t.node.borrow();
            if let Some(op) = &node.op {
                for p in &op.parents {
                    if !visited.contains(&p.ptr_id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let node = t.node.borrow();
            let Some(op) = &node.op else { continue };
            let Some(grad) = node.grad.clone() else {
                continue;
            };
            (op.backward)(&grad);
        }
        Ok(())
    }
}

/// Accumulate a gradient contribution into `t` only if it participates in
/// backpropagation; the contribution is not even computed otherwise.
pub(crate) fn accum_into<T: Scalar>(t: &Tensor<T>, contrib: impl FnOnce() -> Vec<T>) {
    if t.tracked() {
        let c = contrib();
        t.accumulate_grad(&c);
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let node = self.node.borrow();
        f.debug_struct("Tensor")
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .field("data", &node.data)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_construction_checks_length() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.shape(), vec![3]);
        assert_eq!(t.value(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let t = Tensor::<f64>::vector(vec![1.0, 2.0]).as_param();
        assert!(t.backward().is_err());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f64>::vector(vec![1.0, 2.0]).as_param();
        let y = no_grad(|| crate::numerics::ops::sum_all(&x).unwrap());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_restores_on_exit() {
        assert!(tape_enabled());
        no_grad(|| assert!(!tape_enabled()));
        assert!(tape_enabled());
    }
}
