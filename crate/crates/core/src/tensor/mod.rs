//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, owned buffers behind an `Arc` so parameter data can
//! be shared across worker threads without copying. The autodiff graph is a
//! per-step tape: each op output records its parents and a backward closure,
//! and `backward` consumes the graph after one reverse sweep. Scalars are
//! generic over `f32`/`f64`; gradient oracles run in `f64`, training in `f32`.

mod checkpoint;
mod ops;
mod store;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ops::{op_forward, AttnMask, Mode, OpAttrs, OpKind};
pub use store::ParamStore;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::ops::AddAssign;
use std::rc::Rc;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};

use crate::error::TensorError;

/// Checkpoint element type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// Scalar element: `f32` for training runs, `f64` for gradient oracles.
pub trait Scalar:
    Float + FromPrimitive + AddAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn write_le(&self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8], idx: usize) -> Self;
    fn byte_width() -> usize;
    /// Lossless-enough conversion used at checkpoint boundaries.
    fn from_f64_exact(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64")
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8], idx: usize) -> Self {
        f32::from_le_bytes(bytes[idx * 4..idx * 4 + 4].try_into().unwrap())
    }
    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8], idx: usize) -> Self {
        f64::from_le_bytes(bytes[idx * 8..idx * 8 + 8].try_into().unwrap())
    }
    fn byte_width() -> usize {
        8
    }
}

type BackwardFn<S> = Box<dyn Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>>>;

struct Node<S: Scalar> {
    parents: Vec<Tensor<S>>,
    /// Maps the upstream gradient to one gradient per parent. Parents whose
    /// `needs[i]` is false may be skipped with `None`.
    backward: BackwardFn<S>,
}

struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    node: Option<Node<S>>,
    consumed: bool,
}

/// Dense n-dimensional value with an optional gradient slot.
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<Inner<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            inner.shape, inner.requires_grad
        )
    }
}

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Arc<Vec<S>>, requires_grad: bool, node: Option<Node<S>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                node,
                consumed: false,
            })),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor::new(shape, Arc::new(data), false, None)
    }

    /// Leaf parameter tensor that accumulates gradients during backward.
    pub fn param(shape: Vec<usize>, data: Arc<Vec<S>>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new(shape, data, true, None)
    }

    /// Leaf sharing an existing buffer, with explicit grad tracking.
    pub fn leaf_shared(shape: Vec<usize>, data: Arc<Vec<S>>, requires_grad: bool) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new(shape, data, requires_grad, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![S::zero(); n])
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.borrow().data.as_ref().clone()
    }

    pub fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.inner.borrow().data)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    fn ptr(&self) -> *const RefCell<Inner<S>> {
        Rc::as_ptr(&self.inner)
    }

    fn accumulate_grad(&self, g: &[S]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), inner.data.len());
        match &mut inner.grad {
            Some(existing) => {
                for (e, gi) in existing.iter_mut().zip(g) {
                    *e += *gi;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a scalar root. Accumulates `dL/dx` into the grad of
    /// every reachable tensor with `requires_grad`, then frees the graph; a
    /// second call on the same root is an error.
    pub fn backward(&self) -> Result<(), TensorError> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(TensorError::NonScalarRoot {
                    shape: inner.shape.clone(),
                });
            }
            if inner.node.is_none() {
                return if inner.consumed {
                    Err(TensorError::GraphConsumed)
                } else {
                    Err(TensorError::NoGraph)
                };
            }
        }

        // Iterative post-order DFS over the requires_grad subgraph.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut seen: HashSet<*const RefCell<Inner<S>>> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.ptr());
        while let Some((t, child_idx)) = stack.pop() {
            let next = {
                let inner = t.inner.borrow();
                inner.node.as_ref().and_then(|n| {
                    n.parents[child_idx..]
                        .iter()
                        .enumerate()
                        .find(|(_, p)| p.requires_grad() && !seen.contains(&p.ptr()))
                        .map(|(off, p)| (child_idx + off, p.clone()))
                })
            };
            match next {
                Some((idx, parent)) => {
                    seen.insert(parent.ptr());
                    stack.push((t, idx + 1));
                    stack.push((parent, 0));
                }
                None => order.push(t),
            }
        }

        self.accumulate_grad(&[S::one()]);
        for t in order.iter().rev() {
            let node = t.inner.borrow_mut().node.take();
            let Some(node) = node else { continue };
            let upstream = t
                .inner
                .borrow()
                .grad
                .clone()
                .expect("reverse-topo order guarantees an accumulated grad");
            let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = (node.backward)(&upstream, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, grad) in node.parents.iter().zip(parent_grads) {
                if let (true, Some(g)) = (parent.requires_grad(), grad) {
                    parent.accumulate_grad(&g);
                }
            }
            t.inner.borrow_mut().consumed = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_gives_ones() {
        let x = Tensor::param(vec![3], Arc::new(vec![1.0f64, 2.0, 3.0]));
        let s = x.sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn elementwise_square_grad() {
        let x = Tensor::param(vec![2], Arc::new(vec![1.0f64, 2.0]));
        let y = x.mul(&x).unwrap();
        let s = y.sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn second_backward_errors() {
        let x = Tensor::param(vec![2], Arc::new(vec![1.0f64, 2.0]));
        let s = x.sum_all().unwrap();
        s.backward().unwrap();
        assert!(matches!(s.backward(), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn non_scalar_root_errors() {
        let x = Tensor::param(vec![2], Arc::new(vec![1.0f64, 2.0]));
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarRoot { .. })));
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        // grad of (a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let data = vec![0.3f64, -1.2, 2.0, 0.7];
        let (a, b) = (1.7f64, -0.4);

        let x = Tensor::param(vec![4], Arc::new(data.clone()));
        let l1 = x.mul(&x).unwrap().sum_all().unwrap();
        let l2 = x.silu().unwrap().sum_all().unwrap();
        let root = l1.scale(a).unwrap().add(&l2.scale(b).unwrap()).unwrap();
        root.backward().unwrap();
        let combined = x.grad().unwrap();

        let x1 = Tensor::param(vec![4], Arc::new(data.clone()));
        x1.mul(&x1).unwrap().sum_all().unwrap().backward().unwrap();
        let g1 = x1.grad().unwrap();
        let x2 = Tensor::param(vec![4], Arc::new(data));
        x2.silu().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = x2.grad().unwrap();

        for i in 0..4 {
            let expect = a * g1[i] + b * g2[i];
            assert!((combined[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_accumulates_across_shared_use() {
        let x = Tensor::param(vec![1], Arc::new(vec![3.0f64]));
        let double = x.scale(2.0).unwrap();
        let triple = x.scale(3.0).unwrap();
        let s = double.add(&triple).unwrap().sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }
}
