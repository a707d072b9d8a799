//! A minimal reverse-mode differentiable tensor engine.
//!
//! Tensors are dense `f64` arrays in C order (row-major). Image tensors use
//! the `[batch, channels, height, width]` layout convention. Every operation
//! that participates in training records its inputs and a backward closure,
//! forming an implicit computation graph; [`Tensor::backward`] walks that
//! graph once, in reverse topological order, and accumulates gradients into
//! every leaf that requires them.
//!
//! The engine is deliberately small: it provides exactly the primitives the
//! pyramid-embedded generator, the discriminator, the perception network and
//! the loss terms need, and every primitive's gradient is checkable against
//! central finite differences (see [`gradcheck`]).
//!
//! A graph is confined to one thread during record and backward. Primitives
//! are pure functions of their inputs plus explicit rng state, so disjoint
//! graphs can be evaluated concurrently.

mod conv;
mod ops;

pub use ops::{batchnorm2d, Mode, RunningStats};

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
///
/// Inside the closure no operation records a graph node, so forward passes
/// are cheaper and produce plain value tensors. Used for inference paths.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    RECORDING.with(|r| {
        let prev = r.replace(false);
        let out = f();
        r.set(prev);
        out
    })
}

fn recording() -> bool {
    RECORDING.with(|r| r.get())
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A graph node: the tensors an operation consumed plus the closure that
/// routes the output gradient back into them.
struct Node {
    parents: Vec<Tensor>,
    backward: Box<dyn Fn(&[f64])>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    node: RefCell<Option<Node>>,
    /// Set once backward has consumed this tensor's node. A second backward
    /// through the same graph is a usage error, not a silent wrong answer.
    consumed: Cell<bool>,
}

/// An n-dimensional `f64` array, optionally carrying a gradient and a record
/// of the primitive application that produced it.
///
/// `Tensor` is a cheap handle (`Rc` internally): cloning shares the same
/// storage and graph node. Parameter tensors are leaves with
/// `requires_grad = true`; [`Tensor::backward`] populates their `grad`.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape,
            self.requires_grad()
        )
    }
}

impl Tensor {
    /// Builds a leaf tensor, validating extent/data agreement and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {bad} in tensor data")));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: RefCell::new(None),
                consumed: Cell::new(false),
            }),
        }
    }

    /// Internal constructor for op outputs. Records a node only while
    /// recording is enabled and at least one parent requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let t = Self::from_parts(shape, data);
        if recording() && parents.iter().any(|p| p.requires_grad()) {
            t.inner.requires_grad.set(true);
            *t.inner.node.borrow_mut() = Some(Node {
                parents,
                backward: Box::new(backward),
            });
        }
        t
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; numel])
    }

    /// Gaussian-initialized leaf, mean `mean`, standard deviation `std`.
    pub fn randn(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(mean, std).expect("finite mean/std");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Extracts the single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    /// Overwrites the stored values in place. Shape is fixed at construction.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data with {} values on shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    /// Adds `scale * delta` into the stored values (optimizer updates).
    pub fn add_assign_scaled(&self, delta: &[f64], scale: f64) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(Error::Shape("add_assign_scaled length mismatch".into()));
        }
        let mut d = self.inner.data.borrow_mut();
        for (x, dv) in d.iter_mut().zip(delta) {
            *x += scale * dv;
        }
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A leaf copy sharing no graph history with `self`.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), self.to_vec())
    }

    pub fn has_finite_data(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// True for tensors with no recorded history (parameters, inputs,
    /// detached values).
    pub fn is_leaf(&self) -> bool {
        self.inner.node.borrow().is_none() && !self.inner.consumed.get()
    }

    /// Accumulates a gradient contribution, allocating on first touch.
    /// No-op for tensors that do not require a gradient.
    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        if !self.requires_grad() {
            return;
        }
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Runs `f` against this tensor's gradient buffer, zero-initialized on
    /// first touch. Skipped entirely when no gradient is required, so ops can
    /// scatter-accumulate without building a scratch contribution first.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(g);
    }

    /// Reverse-mode differentiation from a scalar output.
    ///
    /// Visits every recorded node exactly once, children before parents, and
    /// populates `grad` on all reachable tensors with `requires_grad`. The
    /// traversed subgraph is consumed: a second backward through it errors.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward on non-scalar tensor of shape {:?}",
                self.shape()
            )));
        }
        if self.inner.consumed.get() {
            return Err(Error::Usage(
                "backward called twice on the same recorded graph".into(),
            ));
        }
        if self.inner.node.borrow().is_none() {
            return Err(Error::Usage(
                "backward on a leaf: output was not produced through recorded primitives".into(),
            ));
        }

        // Post-order DFS over parent edges: the order lists ancestors before
        // descendants, so the reversed sweep sees each node only after all of
        // its consumers have deposited their contributions.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.inner.node.borrow().as_ref() {
                for p in &node.parents {
                    if !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let node = t.inner.node.borrow_mut().take();
            if let Some(node) = node {
                t.inner.consumed.set(true);
                let g = t
                    .inner
                    .grad
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (node.backward)(&g);
            }
        }
        Ok(())
    }
}

/// Relative error with an epsilon guard on the denominator, the comparison
/// used by every finite-difference check in this crate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![1.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn square_gradient() {
        // y = x * x at x = 3 -> dy/dx = 6
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        x.set_requires_grad(true);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = x.add(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_twice_errors() {
        let x = Tensor::scalar(2.0);
        x.set_requires_grad(true);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_on_leaf_errors() {
        let x = Tensor::scalar(2.0);
        x.set_requires_grad(true);
        assert!(matches!(x.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::scalar(2.0);
        x.set_requires_grad(true);
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(y.is_leaf());
        assert!(!y.requires_grad());
    }

    #[test]
    fn detach_cuts_history() {
        let x = Tensor::scalar(2.0);
        x.set_requires_grad(true);
        let y = x.mul(&x).unwrap();
        let d = y.detach();
        assert!(d.is_leaf());
        let z = d.mul(&d);
        // z has no requiring parents, so no node gets recorded.
        assert!(!z.unwrap().requires_grad());
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // y = x + x -> dy/dx = 2 via two contributions of 1.
        let x = Tensor::scalar(1.5);
        x.set_requires_grad(true);
        let y = x.add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ta = Tensor::randn(&[3, 4], 0.0, 1.0, &mut a);
        let tb = Tensor::randn(&[3, 4], 0.0, 1.0, &mut b);
        assert_eq!(ta.to_vec(), tb.to_vec());
    }
}
