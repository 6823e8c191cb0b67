//! Dense f64 tensors with a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is a cheaply clonable handle to an immutable-shaped,
//! row-major f64 buffer. Applying a primitive records a node (the
//! applied op plus its operands) on the output tensor, so the chain of
//! nodes reachable from a loss is an implicit Wengert tape in creation
//! order. [`backward`] materializes that tape in topological order and
//! replays it in reverse, accumulating vector-Jacobian products into a
//! [`GradStore`].
//!
//! Contracts:
//! - broadcasting is limited to the dedicated primitives (`add_bias`,
//!   `broadcast_tokens`); everything else requires exact shapes.
//! - a tape is single-use: a second `backward` through any already
//!   consumed node is an error until a fresh forward pass rebuilds it.
//! - parameters must not be mutated while a forward/backward that uses
//!   them is in flight.

mod grad_check;
mod ops;

pub use grad_check::grad_check;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
///
/// Inference paths (sampling, evaluation) use this to skip tape
/// construction entirely.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule for one recorded primitive.
///
/// `grad_out` is the upstream gradient for the node's output; the rule
/// accumulates gradients for each input through `sink`.
pub(crate) trait OpBackward {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[f64], inputs: &[Tensor], sink: &mut GradSink);
}

pub(crate) struct Node {
    op: Box<dyn OpBackward>,
    inputs: Vec<Tensor>,
    consumed: Cell<bool>,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Dense row-major f64 tensor handle.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant leaf tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Tensor::from_parts(data, shape.to_vec(), false, None))
    }

    /// Parameter leaf: gradients accumulate for it during backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: t.inner.id,
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.to_vec()),
                requires_grad: true,
                node: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(vec![0.0; numel], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(vec![value; numel], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![value], vec![1], false, None)
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        op: Box<dyn OpBackward>,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let record = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = record.then(|| Node {
            op,
            inputs,
            consumed: Cell::new(false),
        });
        Ok(Tensor::from_parts(data, shape, record, node))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrows the underlying buffer.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Mutably borrows the underlying buffer. Callers must not hold
    /// this across a forward/backward that uses the tensor.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        let d = self.inner.data.borrow();
        if d.len() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                shape: self.shape().to_vec(),
                reason: "expected a single element".into(),
            });
        }
        Ok(d[0])
    }

    /// Severs the tensor from its tape: same data, no provenance.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Reverse-mode sweep from this scalar loss.
    ///
    /// Parameters not reachable from the loss simply stay absent from
    /// the store; [`GradStore::grad_or_zeros`] reads them as zero.
    pub fn backward(&self) -> Result<GradStore> {
        Tape::trace(self)?.run(self)
    }
}

/// Accumulated gradients keyed by tensor identity.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient for `t`, zeros if no gradient flowed to it.
    pub fn grad_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        match self.grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => vec![0.0; t.numel()],
        }
    }
}

/// Accumulation sink handed to backward rules.
pub(crate) struct GradSink {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    pub(crate) fn accumulate(&mut self, t: &Tensor, grad: Vec<f64>) {
        if !t.requires_grad() {
            return;
        }
        debug_assert_eq!(grad.len(), t.numel());
        match self.grads.get_mut(&t.id()) {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad.iter()) {
                    *a += g;
                }
            }
            None => {
                self.grads.insert(t.id(), grad);
            }
        }
    }
}

/// Materialized tape: the op nodes reachable from a loss, in
/// topological order (every node's inputs precede it).
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Collects the tape under `root`. Errors if any node was already
    /// consumed by a previous backward.
    pub fn trace(root: &Tensor) -> Result<Tape> {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut stack: Vec<Tensor> = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.inner.node {
                if node.consumed.get() {
                    return Err(Error::TapeConsumed);
                }
                for input in &node.inputs {
                    stack.push(input.clone());
                }
                nodes.push(t.clone());
            }
        }
        // Creation ids are monotone and an op's inputs always exist
        // before its output, so id order is a topological order.
        nodes.sort_by_key(|t| t.id());
        Ok(Tape { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True if every node's inputs appear before the node itself.
    pub fn is_topologically_ordered(&self) -> bool {
        let mut position: HashMap<u64, usize> = HashMap::new();
        for (i, t) in self.nodes.iter().enumerate() {
            position.insert(t.id(), i);
        }
        for (i, t) in self.nodes.iter().enumerate() {
            let node = t.inner.node.as_ref().expect("tape nodes carry ops");
            for input in &node.inputs {
                if let Some(&j) = position.get(&input.id()) {
                    if j >= i {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn run(self, loss: &Tensor) -> Result<GradStore> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut sink = GradSink {
            grads: HashMap::new(),
        };
        sink.grads.insert(loss.id(), vec![1.0]);
        for t in self.nodes.iter().rev() {
            let node = t.inner.node.as_ref().expect("tape nodes carry ops");
            node.consumed.set(true);
            let Some(grad_out) = sink.grads.get(&t.id()).cloned() else {
                continue;
            };
            node.op.backward(&grad_out, &node.inputs, &mut sink);
        }
        Ok(GradStore { grads: sink.grads })
    }
}
