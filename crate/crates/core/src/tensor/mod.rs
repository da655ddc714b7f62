//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every operation that touches a tensor requiring gradients records a
//! backward closure together with handles to its inputs. The graph is
//! therefore built dynamically during the forward pass and discarded when
//! the last handle to the output is dropped. [`Tensor::backward`] walks the
//! recorded graph in reverse topological order and accumulates gradients
//! into the leaves that asked for them.
//!
//! Leaf values are immutable; optimizers replace a parameter with a fresh
//! leaf instead of mutating it in place.

mod gemm;
pub mod grad_check;
pub mod io;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{Error, Result};

pub use gemm::{gemm, MatLayout};
pub use grad_check::{grad_check, grad_check_many, GradCheckOptions, GradReport};
pub use ops::{BinaryOp, ReduceOp, UnaryOp};

/// Real scalar types a [`Tensor`] can hold.
pub trait Scalar:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// The pointers must address valid storage for the given extents and
    /// strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting a literal into the working precision.
#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Per-parent gradient contributions returned by a backward closure.
/// `None` means the parent does not need a gradient.
pub(crate) type ParentGrads<T> = Vec<Option<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&[T]) -> ParentGrads<T> + Send + Sync>;

struct GradFn<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: usize,
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node of the computation graph. Cloning is cheap.
pub struct Tensor<T: Scalar = f32> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.node.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn make(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                shape,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Builds a constant tensor. Fails if `data` does not fill `shape`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let expected = numel(shape);
        if data.len() != expected {
            return Err(Error::ElementCount {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        Ok(Self::make(data, shape.to_vec(), false, None))
    }

    /// Builds a leaf that accumulates gradients during [`Tensor::backward`].
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.requires_grad(true))
    }

    pub fn scalar(v: T) -> Self {
        Self::make(vec![v], vec![1], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::make(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Returns a new leaf sharing the values of `self` with the given flag.
    pub fn requires_grad(self, flag: bool) -> Self {
        if self.node.grad_fn.is_none() && self.node.requires_grad == flag {
            return self;
        }
        Self::make(self.node.data.clone(), self.node.shape.clone(), flag, None)
    }

    /// Cuts the graph: a constant leaf with the same values.
    pub fn detach(&self) -> Self {
        Self::make(self.node.data.clone(), self.node.shape.clone(), false, None)
    }

    /// Records the result of a differentiable operation. The backward
    /// closure is only kept when at least one parent requires gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> ParentGrads<T> + Send + Sync + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Self::make(data, shape, requires_grad, grad_fn)
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn needs_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.node.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.node.shape
            ))),
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Converts to another precision as a constant leaf, keeping the flag.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::make(data, self.node.shape.clone(), self.node.requires_grad && self.is_leaf(), None)
    }

    /// Back-propagates from a one-element tensor. Gradients accumulate into
    /// every reachable leaf created with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarSeed(self.node.shape.clone()));
        }
        if !self.node.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.node.id, vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let contributions = (gf.backward)(&g);
                    debug_assert_eq!(contributions.len(), gf.parents.len());
                    for (parent, contrib) in gf.parents.iter().zip(contributions) {
                        let Some(pg) = contrib else { continue };
                        if !parent.node.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match pending.get_mut(&parent.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(parent.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.node.requires_grad && !visited.contains(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl<T: Scalar> Drop for Node<T> {
    // Long chains of Arc-linked nodes would otherwise drop recursively.
    fn drop(&mut self) {
        let Some(gf) = self.grad_fn.take() else {
            return;
        };
        let mut stack = gf.parents;
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.node) {
                if let Some(inner) = node.grad_fn.take() {
                    stack.extend(inner.parents);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        let err = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        assert!(matches!(err, Error::ElementCount { expected: 4, actual: 3, .. }));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::NonScalarSeed(_))));
    }

    #[test]
    fn square_sum_gradient_is_twice_x() {
        let x = Tensor::<f64>::parameter(vec![1.5, -2.0, 0.25], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -4.0, 0.5]);
    }

    #[test]
    fn sigmoid_sum_gradient() {
        let xs = [-1.0, 0.0, 2.0];
        let x = Tensor::<f64>::parameter(xs.to_vec(), &[3]).unwrap();
        x.sigmoid().sum_all().backward().unwrap();
        for (g, v) in x.grad().unwrap().iter().zip(xs) {
            let s = 1.0 / (1.0 + (-v as f64).exp());
            assert!((g - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates_exactly() {
        let x = Tensor::<f64>::parameter(vec![0.3, -1.7, 2.2], &[3]).unwrap();
        let loss = x.sigmoid().mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn unreached_leaves_stay_empty() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let unused = Tensor::<f64>::parameter(vec![5.0], &[1]).unwrap();
        let _side = unused.exp();
        x.sum_all().backward().unwrap();
        assert!(unused.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn constants_record_no_graph() {
        let a = Tensor::<f32>::ones(&[2, 2]);
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.needs_grad());
    }

    #[test]
    fn shared_subexpression_gets_both_contributions() {
        // y = x * x where both operands are the same node.
        let x = Tensor::<f64>::parameter(vec![3.0], &[1]).unwrap();
        let h = x.exp();
        let y = h.mul(&h).unwrap().sum_all();
        y.backward().unwrap();
        let g = x.grad().unwrap()[0];
        assert!((g - 2.0 * (6.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = Tensor::<f32>::parameter(vec![1.0], &[1]).unwrap();
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.mul_scalar(1.0);
        }
        drop(y);
    }
}
