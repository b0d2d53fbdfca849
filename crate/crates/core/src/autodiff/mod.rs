//! Reverse-mode automatic differentiation over a dynamic graph.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Tensors produced
//! from inputs that track gradients carry a [`Node`] recording the operation
//! and its inputs, so the graph is the transitive closure of those links.
//!
//! [`grad`] walks the graph backwards from a scalar. Every backward rule is
//! written in terms of ordinary tensor operations: with
//! `create_graph = false` they run with recording disabled, with
//! `create_graph = true` they record new nodes and the returned gradients can
//! be differentiated again. Second order is the supported limit.

mod conv;
mod elementwise;
mod gemm;
mod linalg;
mod loss;
mod norm;
mod reduce;
mod shape;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{adaptive_avg_pool2d, avg_pool2d, conv2d, conv2d_output_size, global_avg_pool};
pub use elementwise::UnaryKind;
pub use loss::{
    cross_entropy, cross_entropy_per_example, cross_entropy_sum, cosine_similarity_rows,
    l1_mean, l2_norm, row_l2_norms, softmax_rows,
};
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats};

/// Floating point element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn erf(self) -> Self;

    /// `c = alpha * a' * b' + beta * c` with raw strides, see `matrixmultiply`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn cst(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Adjacent representable value with smaller magnitude (0 stays 0).
    fn next_toward_zero(self) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn erf(self) -> Self {
        libm::erff(self)
    }
    unsafe fn gemm_raw(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn next_toward_zero(self) -> Self {
        if self == 0.0 || !self.is_finite() {
            self
        } else {
            f32::from_bits(self.to_bits() - 1)
        }
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn erf(self) -> Self {
        libm::erf(self)
    }
    unsafe fn gemm_raw(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn next_toward_zero(self) -> Self {
        if self == 0.0 || !self.is_finite() {
            self
        } else {
            f64::from_bits(self.to_bits() - 1)
        }
    }
}

// ---------------------------------------------------------------------------
// Recording state

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static HIGHER_ORDER_DEPTH: Cell<usize> = const { Cell::new(0) };
    static NODES_RECORDED: Cell<u64> = const { Cell::new(0) };
    static HIGHER_ORDER_NODES: Cell<u64> = const { Cell::new(0) };
}

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Per-thread graph construction counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Nodes recorded by forward or backward operations.
    pub nodes: u64,
    /// Nodes recorded while running a backward pass with `create_graph`.
    pub higher_order_nodes: u64,
}

impl GraphStats {
    pub fn current() -> Self {
        GraphStats {
            nodes: NODES_RECORDED.with(|c| c.get()),
            higher_order_nodes: HIGHER_ORDER_NODES.with(|c| c.get()),
        }
    }

    pub fn since(self, earlier: GraphStats) -> GraphStats {
        GraphStats {
            nodes: self.nodes - earlier.nodes,
            higher_order_nodes: self.higher_order_nodes - earlier.higher_order_nodes,
        }
    }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
        GradModeGuard { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Run `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _g = GradModeGuard::set(false);
    f()
}

/// Run `f` with recording enabled, even inside [`no_grad`].
pub fn enable_grad<R>(f: impl FnOnce() -> R) -> R {
    let _g = GradModeGuard::set(true);
    f()
}

struct HigherOrderGuard;

impl HigherOrderGuard {
    fn enter() -> Self {
        HIGHER_ORDER_DEPTH.with(|c| c.set(c.get() + 1));
        HigherOrderGuard
    }
}

impl Drop for HigherOrderGuard {
    fn drop(&mut self) {
        HIGHER_ORDER_DEPTH.with(|c| c.set(c.get() - 1));
    }
}

// ---------------------------------------------------------------------------
// Graph

pub(crate) struct BackwardCtx<'a, F: Element> {
    pub inputs: &'a [Tensor<F>],
    pub output: &'a Tensor<F>,
    pub grad: &'a Tensor<F>,
    pub needs: &'a [bool],
}

/// A differentiable operation recorded in the graph.
pub(crate) trait Op<F: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian products for each input whose `needs` flag is set.
    fn backward(&self, ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>>;
}

struct Leaf;

impl<F: Element> Op<F> for Leaf {
    fn name(&self) -> &'static str {
        "leaf"
    }
    fn backward(&self, _ctx: &BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(Vec::new())
    }
}

pub struct Node<F: Element> {
    id: u64,
    op: Box<dyn Op<F>>,
    inputs: Vec<Tensor<F>>,
    shape: Vec<usize>,
    value: Arc<Vec<F>>,
}

impl<F: Element> Node<F> {
    pub fn id(&self) -> u64 {
        self.id
    }
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }
}

/// Dense row-major array, optionally attached to a graph node.
pub struct Tensor<F: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<Arc<Node<F>>>,
}

impl<F: Element> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<F> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &F::DTYPE)
            .field("requires_grad", &self.requires_grad())
            .field("data[..8]", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Element> Tensor<F> {
    pub fn from_vec(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub(crate) fn raw(data: Vec<F>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Tensor::raw(vec![v; numel(shape)], shape.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(v: F) -> Self {
        Tensor::raw(vec![v], Vec::new())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    /// Whether this tensor is attached to a graph node.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Promote to a graph leaf. Gradients can then be requested for it.
    pub fn into_leaf(self) -> Self {
        let node = Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            op: Box::new(Leaf),
            inputs: Vec::new(),
            shape: self.shape.clone(),
            value: Arc::clone(&self.data),
        });
        Tensor {
            shape: self.shape,
            data: self.data,
            node: Some(node),
        }
    }

    pub fn leaf(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.into_leaf())
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn node_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Elementwise map producing a constant (untracked) tensor.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor::raw(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    /// Elementwise combination of two same-shaped tensors into a constant tensor.
    pub fn zip_map(&self, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::raw(
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
            self.shape.clone(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &v| m.max(v.abs()))
    }

    /// Convert element type. The result is a constant.
    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor::raw(
            self.data.iter().map(|&v| G::cst(v.as_f64())).collect(),
            self.shape.clone(),
        )
    }
}

/// Attach `value` to the graph if recording is on and any input is tracked.
pub(crate) fn record<F: Element, O: Op<F> + 'static>(
    value: Vec<F>,
    shape: Vec<usize>,
    op: O,
    inputs: &[&Tensor<F>],
) -> Result<Tensor<F>> {
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op.name()));
    }
    Ok(record_shared(Arc::new(value), shape, op, inputs))
}

/// Like [`record`] but reuses an existing buffer and skips the finiteness scan.
pub(crate) fn record_shared<F: Element, O: Op<F> + 'static>(
    data: Arc<Vec<F>>,
    shape: Vec<usize>,
    op: O,
    inputs: &[&Tensor<F>],
) -> Tensor<F> {
    let tracked = is_grad_enabled() && inputs.iter().any(|t| t.node.is_some());
    let node = if tracked {
        NODES_RECORDED.with(|c| c.set(c.get() + 1));
        if HIGHER_ORDER_DEPTH.with(|c| c.get()) > 0 {
            HIGHER_ORDER_NODES.with(|c| c.set(c.get() + 1));
        }
        Some(Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            op: Box::new(op),
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            shape: shape.clone(),
            value: Arc::clone(&data),
        }))
    } else {
        None
    };
    Tensor { shape, data, node }
}

// ---------------------------------------------------------------------------
// Backward engine

#[derive(Debug, Clone, Copy, Default)]
pub struct GradOptions {
    /// Record the backward pass so the returned gradients are differentiable.
    pub create_graph: bool,
    /// Return zeros for inputs the output does not depend on instead of failing.
    pub allow_unused: bool,
}

impl GradOptions {
    pub fn create_graph() -> Self {
        GradOptions {
            create_graph: true,
            allow_unused: false,
        }
    }
    pub fn allow_unused(mut self) -> Self {
        self.allow_unused = true;
        self
    }
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
pub fn grad<F: Element>(
    output: &Tensor<F>,
    inputs: &[&Tensor<F>],
    opts: GradOptions,
) -> Result<Vec<Tensor<F>>> {
    if output.numel() != 1 {
        return Err(Error::NonScalarOutput(output.shape.clone()));
    }
    let targets: HashSet<u64> = inputs.iter().filter_map(|t| t.node_id()).collect();

    let mut grads: HashMap<u64, Tensor<F>> = HashMap::new();
    if let Some(root) = &output.node {
        let order = topo_order(root);
        let mut relevant: HashMap<u64, bool> = HashMap::with_capacity(order.len());
        for node in &order {
            let r = targets.contains(&node.id)
                || node
                    .inputs
                    .iter()
                    .any(|t| t.node.as_ref().is_some_and(|c| relevant[&c.id]));
            relevant.insert(node.id, r);
        }

        let _mode = GradModeGuard::set(opts.create_graph);
        let _ho = opts.create_graph.then(HigherOrderGuard::enter);

        grads.insert(root.id, Tensor::ones(&output.shape));
        for node in order.iter().rev() {
            if !relevant[&node.id] || node.inputs.is_empty() {
                continue;
            }
            let g = match grads.remove(&node.id) {
                Some(g) => g,
                None => continue,
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|t| t.node.as_ref().is_some_and(|c| relevant[&c.id]))
                .collect();
            if targets.contains(&node.id) {
                grads.insert(node.id, g.clone());
            }
            let out = Tensor {
                shape: node.shape.clone(),
                data: Arc::clone(&node.value),
                node: Some(Arc::clone(node)),
            };
            let ctx = BackwardCtx {
                inputs: &node.inputs,
                output: &out,
                grad: &g,
                needs: &needs,
            };
            let input_grads = node.op.backward(&ctx)?;
            for ((inp, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                let id = inp.node.as_ref().map(|n| n.id).expect("needed input is tracked");
                if ig.shape != inp.shape {
                    return Err(Error::shape(
                        "backward",
                        format!(
                            "{} produced gradient {:?} for input {:?}",
                            node.op.name(),
                            ig.shape,
                            inp.shape
                        ),
                    ));
                }
                let acc = match grads.remove(&id) {
                    Some(prev) => prev.add(&ig)?,
                    None => ig,
                };
                grads.insert(id, acc);
            }
        }
    }

    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let g = t.node_id().and_then(|id| grads.get(&id).cloned());
            match g {
                Some(g) if !g.is_finite() => Err(Error::NonFinite("backward")),
                Some(g) => Ok(g),
                None if opts.allow_unused => Ok(t.zeros_like()),
                None => Err(Error::Disconnected(i)),
            }
        })
        .collect()
}

/// Post-order (inputs before consumers) over the graph reachable from `root`.
fn topo_order<F: Element>(root: &Arc<Node<F>>) -> Vec<Arc<Node<F>>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Arc<Node<F>>, usize)> = vec![(Arc::clone(root), 0)];
    visited.insert(root.id);
    while !stack.is_empty() {
        let next_child = {
            let (node, i) = stack.last_mut().expect("non-empty");
            if *i < node.inputs.len() {
                let child = node.inputs[*i].node.clone();
                *i += 1;
                Some(child)
            } else {
                None
            }
        };
        match next_child {
            Some(Some(child)) => {
                if visited.insert(child.id) {
                    stack.push((child, 0));
                }
            }
            Some(None) => {}
            None => {
                let (node, _) = stack.pop().expect("non-empty");
                order.push(node);
            }
        }
    }
    order
}

#[cfg(test)]
mod tests;
