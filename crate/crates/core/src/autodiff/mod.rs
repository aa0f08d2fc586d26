//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Var`] is a reference-counted node holding its forward value, its input
//! nodes and an adjoint closure. Nodes stay alive exactly as long as something
//! downstream still refers to them, so the per-graph live-node gauge measures
//! how much of the computation is being retained for backpropagation.
//! [`Var::detach`] produces a fresh leaf with no link to the nodes behind it,
//! which lets those nodes be freed as soon as their last consumer is dropped.

mod ops;

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::conv_output_len;

/// Unique across all graphs, so values from different graphs may be combined.
pub type NodeId = usize;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Default)]
struct GraphStats {
    live: Cell<usize>,
    peak: Cell<usize>,
}

/// Owner of node bookkeeping: ids plus the live/peak node gauges.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    stats: Rc<GraphStats>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Nodes currently alive in this graph.
    pub fn live_node_count(&self) -> usize {
        self.stats.live.get()
    }

    /// High-water mark of [`Graph::live_node_count`] since creation or the
    /// last [`Graph::reset_peak`].
    pub fn peak_live_node_count(&self) -> usize {
        self.stats.peak.get()
    }

    pub fn reset_peak(&self) {
        self.stats.peak.set(self.stats.live.get());
    }

    /// A leaf that never receives a gradient.
    pub fn constant<T: Scalar>(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false, None)
    }

    /// A differentiable leaf.
    pub fn variable<T: Scalar>(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, true, None)
    }

    /// A differentiable leaf whose gradient is reported under `name`.
    pub fn param<T: Scalar>(&self, name: impl Into<String>, value: Tensor<T>) -> Var<T> {
        self.leaf(value, true, Some(name.into()))
    }

    fn leaf<T: Scalar>(&self, value: Tensor<T>, requires_grad: bool, name: Option<String>) -> Var<T> {
        Var::alloc(&self.stats, value, Vec::new(), None, requires_grad, name)
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    id: NodeId,
    value: Tensor<T>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    name: Option<String>,
    retain: Cell<bool>,
    stats: Rc<GraphStats>,
}

impl<T: Scalar> Drop for Node<T> {
    fn drop(&mut self) {
        self.stats.live.set(self.stats.live.get() - 1);
        // Unlink iteratively; long rollouts would otherwise recurse once per node.
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// Handle to a node of the differentiation graph.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn alloc(
        stats: &Rc<GraphStats>,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
        name: Option<String>,
    ) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        let live = stats.live.get() + 1;
        stats.live.set(live);
        if live > stats.peak.get() {
            stats.peak.set(live);
        }
        Var(Rc::new(Node {
            id,
            value,
            parents,
            backward,
            requires_grad,
            name,
            retain: Cell::new(false),
            stats: Rc::clone(stats),
        }))
    }

    /// Records an op node. Inputs that need no gradient are not retained.
    pub(crate) fn record(
        parents: Vec<Var<T>>,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Self {
        let stats = Rc::clone(&parents[0].0.stats);
        if parents.iter().any(Var::requires_grad) {
            Self::alloc(&stats, value, parents, Some(Box::new(backward)), true, None)
        } else {
            Self::alloc(&stats, value, Vec::new(), None, false, None)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> NodeId {
        self.0.id
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn graph(&self) -> Graph {
        Graph {
            stats: Rc::clone(&self.0.stats),
        }
    }

    /// Keep this node's gradient in the [`Gradients`] returned by [`backward`].
    pub fn retain_grad(&self) {
        self.0.retain.set(true);
    }

    /// Same values, no graph linkage.
    pub fn detach(&self) -> Var<T> {
        Self::alloc(&self.0.stats, self.0.value.clone(), Vec::new(), None, false, None)
    }
}

/// Gradients produced by [`backward`]: one entry per differentiable leaf
/// reached from the loss (plus any node marked with [`Var::retain_grad`]).
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: HashMap<NodeId, Tensor<T>>,
    names: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|id| self.grads.get(id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients of the named leaves, keyed by name.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        self.names
            .into_iter()
            .filter_map(|(name, id)| self.grads.remove(&id).map(|g| (name, g)))
            .collect()
    }
}

/// Backpropagates from a scalar `loss`. The graph is released when the
/// caller drops its remaining handles.
pub fn backward<T: Scalar>(loss: Var<T>) -> Result<Gradients<T>> {
    if loss.value().numel() != 1 {
        return Err(Error::InvalidShape {
            op: "backward",
            detail: format!("loss must be scalar, got shape {:?}", loss.shape()),
        });
    }
    let mut out = Gradients {
        grads: HashMap::new(),
        names: BTreeMap::new(),
    };
    if !loss.requires_grad() {
        return Ok(out);
    }

    // Post-order DFS over grad-requiring nodes: inputs precede consumers.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut visited: HashSet<NodeId> = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(loss.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        let parents: Vec<Var<T>> =
            v.0.parents
                .iter()
                .filter(|p| p.requires_grad() && !visited.contains(&p.id()))
                .cloned()
                .collect();
        stack.push((v, true));
        stack.extend(parents.into_iter().map(|p| (p, false)));
    }

    let mut pending: HashMap<NodeId, Tensor<T>> = HashMap::new();
    pending.insert(loss.id(), Tensor::ones(loss.shape().to_vec()));
    drop(loss);

    for v in order.iter().rev() {
        let keep = v.is_leaf() || v.0.retain.get();
        let Some(g) = pending.remove(&v.id()) else {
            continue;
        };
        if let Some(bf) = &v.0.backward {
            let parent_grads = bf(&g, &v.0.parents, &v.0.value)?;
            for (p, pg) in v.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                if pg.shape() != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "backward",
                        lhs: pg.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.add_assign(&pg)?,
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        if keep {
            if let Some(name) = v.name() {
                out.names.insert(name.to_string(), v.id());
            }
            out.grads.insert(v.id(), g);
        }
    }
    Ok(out)
}

const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max over coordinates of `|analytic − central difference| / max(|a|, |n|, 1e-6)`.
///
/// The floor keeps exactly-zero gradients (where the difference quotient is
/// pure round-off, around 1e-11 at `eps = 1e-5`) from reading as failures.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    grad_check_coords(f, input, eps, None).map(|r| r.max_rel_error)
}

/// [`grad_check`] restricted to `coords` (every coordinate when `None`).
pub fn grad_check_coords<F>(f: F, input: &Tensor<f64>, eps: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let graph = Graph::new();
    let x = graph.variable(input.clone());
    let y = f(&x)?;
    if y.value().numel() != 1 {
        return Err(Error::InvalidShape {
            op: "grad_check",
            detail: format!("function must be scalar-valued, got {:?}", y.shape()),
        });
    }
    check_finite(y.value().item())?;
    let grads = backward(y)?;
    let analytic = grads
        .get(&x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
    drop(x);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = f(&g.constant(t))?.value().item();
        check_finite(v)?;
        Ok(v)
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..input.numel()).collect();
            &all
        }
    };
    let mut report: Option<GradCheck> = None;
    for &i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if report.is_none_or(|r| rel > r.max_rel_error) {
            report = Some(GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            });
        }
    }
    report.ok_or_else(|| Error::invalid("grad_check: no coordinates to check"))
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("grad_check function returned non-finite {v}")))
    }
}
