//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every op produces a new immutable node that keeps handles to its inputs and
//! a backward rule. Node ids increase monotonically, so sorting the nodes
//! reachable from the loss by descending id is a valid reverse topological
//! order; [`Graph`] does exactly that.

mod error;
mod ops;
mod scalar;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use error::{Result, TensorError};
pub use ops::{concat, conv2d, conv_out_dim};
pub use scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// An n-dimensional array node in a differentiation graph.
///
/// Cloning is cheap: clones share the same node.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero-sized dimension".into(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Rc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op: "leaf",
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Rc::new(data), shape.to_vec(), false)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(Rc::new(data), shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![T::zero(); n], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[1]).expect("scalar shape is valid")
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut d = vec![T::zero(); n * n];
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        Self::new(d, &[n, n])
    }

    /// Result of an op. Parents and the backward rule are only retained when
    /// some parent needs a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{op}");
        #[cfg(debug_assertions)]
        if parents.iter().all(|p| p.is_finite()) {
            assert!(
                data.iter().all(|v| v.is_finite()),
                "{op} produced a non-finite value from finite inputs"
            );
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            shape,
            data: Rc::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same data, cut loose from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.shared_data(), self.0.shape.clone(), false).expect("valid shape")
    }

    fn accumulate(&self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate gradients are released once propagated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        let graph = Graph::from_root(self);
        if !self.requires_grad() {
            return Ok(());
        }
        self.accumulate(vec![T::one()]);
        for node in graph.nodes() {
            let Some(rule) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = node.0.grad.borrow_mut().take() else {
                continue;
            };
            let grads = rule(&g, &node.0.parents);
            for (parent, pg) in node.0.parents.iter().zip(grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        parent.accumulate(pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Backward plus a check that each of `leaves` was reached. Unreached
    /// leaves keep a zero gradient and are reported (and logged as a warning).
    pub fn backward_for(&self, leaves: &[(&str, &Tensor<T>)]) -> Result<Vec<String>> {
        self.backward()?;
        let mut disconnected = Vec::new();
        for (name, leaf) in leaves {
            if leaf.grad().is_none() {
                log::warn!("leaf `{name}` is disconnected from the loss; gradient stays zero");
                disconnected.push(name.to_string());
            }
        }
        Ok(disconnected)
    }
}

/// Nodes reachable from a root that participate in differentiation, in
/// reverse topological order (root first).
pub struct Graph<T: Scalar> {
    order: Vec<Tensor<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn from_root(root: &Tensor<T>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        Graph { order }
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.order.iter().map(|t| t.0.id).collect()
    }

    /// Op names in visiting order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.order.iter().map(|t| t.0.op).collect()
    }

    /// Whether `a` appears before all of `a`'s parents, for every node.
    pub fn is_reverse_topological(&self) -> bool {
        let pos: std::collections::HashMap<u64, usize> =
            self.order.iter().enumerate().map(|(i, t)| (t.0.id, i)).collect();
        self.order.iter().enumerate().all(|(i, t)| {
            t.0.parents
                .iter()
                .filter_map(|p| pos.get(&p.0.id))
                .all(|&j| j > i)
        })
    }
}

#[cfg(test)]
mod tests;
