//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly when it is recorded, and the node
//! keeps its parents so the whole graph can be re-evaluated later with new
//! leaf values (`evaluate`) and differentiated (`backward`). Nodes are stored
//! in recording order, which is a topological order by construction.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss must be a scalar, node {node} has shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("backward requested before the graph was evaluated with its current inputs")]
    NotEvaluated,
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("duplicate input name `{0}`")]
    DuplicateName(String),
    #[error("cannot differentiate a zero-size tensor")]
    Degenerate,
    #[error("invalid argument at node {node} ({op}): {detail}")]
    Invalid { node: usize, op: &'static str, detail: String },
}

pub type GraphResult<T> = Result<T, GraphError>;

/// Value transform whose output is treated as a constant by `backward`.
pub type DetachedFn<T> = Arc<dyn Fn(&Tensor<T>) -> Result<Tensor<T>, String> + Send + Sync>;

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    LayerNormRows(Var, T),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    Interp1d { table: Var, positions: Var },
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanRows(Var),
    MaskRows { input: Var, token: Var, mask: Vec<bool> },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    SpatialMean(Var),
    Detached(Var, DetachedFn<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Interp1d { .. } => "interp1d",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::MaskRows { .. } => "mask_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::SpatialMean(..) => "spatial_mean",
            Op::Detached(..) => "detached",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::L2NormalizeRows(a)
            | Op::LayerNormRows(a, _)
            | Op::SliceRows(a, ..)
            | Op::SliceCols(a, ..)
            | Op::Reshape(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumCols(a)
            | Op::MeanRows(a)
            | Op::SpatialMean(a)
            | Op::Detached(a, _) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Interp1d { table, positions } => vec![*table, *positions],
            Op::MaskRows { input, token, .. } => vec![*input, *token],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Reverse-differentiable computation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, Var>,
    outputs: BTreeMap<String, Var>,
    stale: bool,
    check_finite: bool,
    fault: Option<(&'static str, T)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).field("inputs", &self.names.len()).finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
            outputs: BTreeMap::new(),
            stale: false,
            check_finite: true,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ----- leaves -------------------------------------------------------

    /// Named input leaf. Names must be unique within a graph.
    pub fn input(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> GraphResult<Var> {
        if self.names.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let v = self.push_leaf(value, requires_grad);
        self.names.insert(name.to_string(), v);
        Ok(v)
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> GraphResult<Var> {
        self.input(name, value, true)
    }

    /// Anonymous constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Registers a named output returned by [`Graph::evaluate`].
    pub fn mark_output(&mut self, name: &str, v: Var) {
        self.outputs.insert(name.to_string(), v);
    }

    /// Replaces the value of a named leaf. The graph must be re-evaluated
    /// before `backward` is allowed again.
    pub fn bind(&mut self, name: &str, value: Tensor<T>) -> GraphResult<()> {
        let v = self.lookup(name).ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
        if self.nodes[v.0].value.shape() != value.shape() {
            return Err(GraphError::ShapeMismatch {
                node: v.0,
                op: "leaf",
                detail: format!("bound {:?}, expected {:?}", value.shape(), self.nodes[v.0].value.shape()),
            });
        }
        self.nodes[v.0].value = value;
        self.stale = true;
        Ok(())
    }

    pub(crate) fn set_value_unchecked(&mut self, v: Var, value: Tensor<T>) {
        self.nodes[v.0].value = value;
        self.stale = true;
    }

    /// Disables the per-node non-finite check (enabled by default).
    /// Scales every adjoint produced by ops named `op`. Only useful for
    /// proving that a gradient check catches a broken backward pass.
    #[doc(hidden)]
    pub fn corrupt_adjoint(&mut self, op: &'static str, factor: T) {
        self.fault = Some((op, factor));
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    // ----- access -------------------------------------------------------

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Option<T> {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; zeros when `v` is
    /// not on a differentiable path to the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn grad_by_name(&self, name: &str) -> Option<Tensor<T>> {
        self.lookup(name).map(|v| self.grad(v))
    }

    // ----- evaluation ---------------------------------------------------

    /// Rebinds the given named inputs and recomputes every node in order.
    pub fn evaluate(&mut self, inputs: &[(&str, Tensor<T>)]) -> GraphResult<BTreeMap<String, Tensor<T>>> {
        for (name, t) in inputs {
            self.bind(name, t.clone())?;
        }
        self.recompute(false)?;
        Ok(self.outputs.iter().map(|(k, v)| (k.clone(), self.nodes[v.0].value.clone())).collect())
    }

    /// Recomputes all non-leaf nodes. With `freeze_detached`, detached nodes
    /// keep their current values, matching what `backward` treats as constant.
    pub fn recompute(&mut self, freeze_detached: bool) -> GraphResult<()> {
        for i in 0..self.nodes.len() {
            let op = &self.nodes[i].op;
            if matches!(op, Op::Leaf) || (freeze_detached && matches!(op, Op::Detached(..))) {
                continue;
            }
            let value = self.compute(i, op)?;
            self.nodes[i].value = value;
        }
        self.stale = false;
        Ok(())
    }

    fn compute(&self, index: usize, op: &Op<T>) -> GraphResult<Tensor<T>> {
        let name = op.name();
        let out = forward(op, |v: Var| &self.nodes[v.0].value).map_err(|detail| match detail {
            FwdError::Shape(detail) => GraphError::ShapeMismatch { node: index, op: name, detail },
            FwdError::Invalid(detail) => GraphError::Invalid { node: index, op: name, detail },
        })?;
        if self.check_finite && !out.all_finite() {
            return Err(GraphError::NonFinite { node: index, op: name });
        }
        Ok(out)
    }

    fn record(&mut self, op: Op<T>) -> GraphResult<Var> {
        let index = self.nodes.len();
        let value = self.compute(index, &op)?;
        let requires_grad = match &op {
            Op::Detached(..) => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        Ok(Var(index))
    }

    // ----- differentiation ----------------------------------------------

    /// Populates gradients of `loss` for every node on a differentiable path.
    /// Gradients accumulate over all uses of a node.
    pub fn backward(&mut self, loss: Var) -> GraphResult<()> {
        if self.stale {
            return Err(GraphError::NotEvaluated);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GraphError::NotScalar { node: loss.0, shape });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g_out) = self.nodes[i].grad.take() else { continue };
            let mut contributions = {
                let node = &self.nodes[i];
                adjoint(&node.op, &node.value, &g_out, |v: Var| &self.nodes[v.0].value)
            };
            if let Some((op, factor)) = self.fault {
                if self.nodes[i].op.name() == op {
                    for (_, g) in &mut contributions {
                        g.data_mut().iter_mut().for_each(|x| *x *= factor);
                    }
                }
            }
            self.nodes[i].grad = Some(g_out);
            for (parent, g) in contributions {
                let p = &mut self.nodes[parent.0];
                if !p.requires_grad {
                    continue;
                }
                match &mut p.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => p.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    // ----- primitive recorders --------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        self.record(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::Transpose(a))
    }
    pub fn add(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> GraphResult<Var> {
        self.record(Op::Mul(a, b))
    }
    /// `[m, n] + [1, n]`, the only broadcast the engine supports.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> GraphResult<Var> {
        self.record(Op::AddRowBias(a, bias))
    }
    pub fn scale(&mut self, a: Var, c: T) -> GraphResult<Var> {
        self.record(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: Var, c: T) -> GraphResult<Var> {
        self.record(Op::AddScalar(a, c))
    }
    pub fn exp(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::Log(a))
    }
    pub fn sqrt(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::Sqrt(a))
    }
    pub fn tanh(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::Tanh(a))
    }
    pub fn silu(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::Silu(a))
    }
    pub fn softmax_rows(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::SoftmaxRows(a))
    }
    pub fn log_softmax_rows(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::LogSoftmaxRows(a))
    }
    /// Normalizes each row to unit Euclidean length. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::L2NormalizeRows(a))
    }
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> GraphResult<Var> {
        self.record(Op::LayerNormRows(a, eps))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> GraphResult<Var> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> GraphResult<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> GraphResult<Var> {
        self.record(Op::SliceRows(a, start, end))
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> GraphResult<Var> {
        self.record(Op::SliceCols(a, start, end))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> GraphResult<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }
    /// Linear interpolation of the rows of `table` (`[len, F]`) at real-valued
    /// `positions` (`[G, 1]`), clamped to `[0, len - 1]`.
    pub fn interp1d(&mut self, table: Var, positions: Var) -> GraphResult<Var> {
        self.record(Op::Interp1d { table, positions })
    }
    pub fn sum(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::SumAll(a))
    }
    pub fn mean(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::MeanAll(a))
    }
    /// `[m, n] -> [m, 1]`, summing across each row.
    pub fn sum_cols(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::SumCols(a))
    }
    /// `[m, n] -> [1, n]`, averaging over rows.
    pub fn mean_rows(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::MeanRows(a))
    }
    /// Replaces rows where `mask` is set with the `[1, n]` row `token`.
    pub fn mask_rows(&mut self, input: Var, token: Var, mask: &[bool]) -> GraphResult<Var> {
        self.record(Op::MaskRows { input, token, mask: mask.to_vec() })
    }
    /// 2D cross-correlation of `[C, H, W]` input with `[O, C, k, k]` weights
    /// and `[O]` bias, zero padding `pad`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> GraphResult<Var> {
        self.record(Op::Conv2d { input, weight, bias, stride, pad })
    }
    /// `[C, H, W] -> [1, C]` spatial average.
    pub fn spatial_mean(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::SpatialMean(a))
    }
    /// Identity whose output receives no gradient.
    pub fn detach(&mut self, a: Var) -> GraphResult<Var> {
        self.record(Op::Detached(a, Arc::new(|t: &Tensor<T>| Ok(t.clone()))))
    }
    /// Applies `f` to the value of `a`; the result is a constant for `backward`.
    pub fn detached_map(&mut self, a: Var, f: DetachedFn<T>) -> GraphResult<Var> {
        self.record(Op::Detached(a, f))
    }
}

enum FwdError {
    Shape(String),
    Invalid(String),
}

impl From<String> for FwdError {
    fn from(s: String) -> Self {
        FwdError::Shape(s)
    }
}

fn rank2<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize), String> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(format!("expected rank-2 tensor, got {s:?}")),
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm_strided(m, k, n, (a, k as isize, 1), (b, n as isize, 1))
}

/// Product of two dense matrices, either of which may be read transposed
/// through its strides.
fn gemm_strided<T: Scalar>(m: usize, k: usize, n: usize, a: (&[T], isize, isize), b: (&[T], isize, isize)) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m * k * n > 0 {
        T::gemm(m, k, n, a, b, &mut out);
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Interpolation support: clamped position, lower index and fraction.
fn interp_coords<T: Scalar>(pos: T, len: usize) -> (usize, T, bool) {
    if len == 1 {
        return (0, T::zero(), false);
    }
    let hi = T::of_usize(len - 1);
    let inside = pos >= T::zero() && pos <= hi;
    let u = pos.max(T::zero()).min(hi);
    let mut i0 = u.floor().to_usize().unwrap_or(0);
    if i0 >= len - 1 {
        i0 = len - 2;
    }
    (i0, u - T::of_usize(i0), inside)
}

fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (extent + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn forward<'a, T: Scalar>(op: &Op<T>, val: impl Fn(Var) -> &'a Tensor<T>) -> Result<Tensor<T>, FwdError> {
    let out = match op {
        Op::Leaf => unreachable!("leaves are never recomputed"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = rank2(a)?;
            let (k2, n) = rank2(b)?;
            if k != k2 {
                return Err(format!("[{m}, {k}] x [{k2}, {n}]").into());
            }
            Tensor::from_vec(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Op::Transpose(a) => {
            let a = val(*a);
            let (r, c) = rank2(a)?;
            Tensor::from_vec(&[c, r], transpose_raw(a.data(), r, c))
        }
        Op::Add(a, b) => {
            same_shape(val(*a), val(*b))?;
            zip_map(val(*a), val(*b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(val(*a), val(*b))?;
            zip_map(val(*a), val(*b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(val(*a), val(*b))?;
            zip_map(val(*a), val(*b), |x, y| x * y)
        }
        Op::AddRowBias(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (_, n) = rank2(a)?;
            if b.len() != n {
                return Err(format!("bias of {} elements for rows of width {n}", b.len()).into());
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::Scale(a, c) => val(*a).map(|x| x * *c),
        Op::AddScalar(a, c) => val(*a).map(|x| x + *c),
        Op::Exp(a) => val(*a).map(T::exp),
        Op::Log(a) => {
            let a = val(*a);
            if a.data().iter().any(|&x| x <= T::zero()) {
                return Err(FwdError::Invalid("logarithm of a non-positive value".into()));
            }
            a.map(T::ln)
        }
        Op::Sqrt(a) => {
            let a = val(*a);
            if a.data().iter().any(|&x| x < T::zero()) {
                return Err(FwdError::Invalid("square root of a negative value".into()));
            }
            a.map(T::sqrt)
        }
        Op::Tanh(a) => val(*a).map(T::tanh),
        Op::Silu(a) => val(*a).map(|x| x * sigmoid(x)),
        Op::SoftmaxRows(a) => {
            let a = val(*a);
            let (_, n) = rank2(a)?;
            let mut out = a.clone();
            for (o, r) in out.data_mut().chunks_mut(n).zip(a.data().chunks(n)) {
                softmax_row(r, o);
            }
            out
        }
        Op::LogSoftmaxRows(a) => {
            let a = val(*a);
            let (_, n) = rank2(a)?;
            let mut out = a.clone();
            for (o, r) in out.data_mut().chunks_mut(n).zip(a.data().chunks(n)) {
                let max = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                for (ov, &rv) in o.iter_mut().zip(r) {
                    *ov = rv - lse;
                }
            }
            out
        }
        Op::L2NormalizeRows(a) => {
            let a = val(*a);
            let (_, n) = rank2(a)?;
            let mut out = a.clone();
            for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm == T::zero() {
                    return Err(FwdError::Invalid(format!("row {i} has zero norm; normalization undefined")));
                }
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            out
        }
        Op::LayerNormRows(a, eps) => {
            let a = val(*a);
            let (_, n) = rank2(a)?;
            let nt = T::of_usize(n);
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n) {
                let mean = row.iter().copied().sum::<T>() / nt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let inv = T::one() / (var + *eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            out
        }
        Op::ConcatRows(parts) => {
            if parts.is_empty() {
                return Err(FwdError::Invalid("nothing to concatenate".into()));
            }
            let n = rank2(val(parts[0]))?.1;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = val(*p);
                let (r, c) = rank2(t)?;
                if c != n {
                    return Err(format!("row width {c} vs {n}").into());
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::from_vec(&[rows, n], data)
        }
        Op::ConcatCols(parts) => {
            if parts.is_empty() {
                return Err(FwdError::Invalid("nothing to concatenate".into()));
            }
            let m = rank2(val(parts[0]))?.0;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = rank2(val(*p))?;
                if r != m {
                    return Err(format!("row count {r} vs {m}").into());
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for (p, &c) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&val(*p).data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::from_vec(&[m, total], data)
        }
        Op::SliceRows(a, s, e) => {
            let a = val(*a);
            let (r, c) = rank2(a)?;
            if s >= e || *e > r {
                return Err(format!("rows {s}..{e} of {r}").into());
            }
            Tensor::from_vec(&[e - s, c], a.data()[s * c..e * c].to_vec())
        }
        Op::SliceCols(a, s, e) => {
            let a = val(*a);
            let (r, c) = rank2(a)?;
            if s >= e || *e > c {
                return Err(format!("cols {s}..{e} of {c}").into());
            }
            let data = a.data().chunks(c).flat_map(|row| row[*s..*e].iter().copied()).collect();
            Tensor::from_vec(&[r, e - s], data)
        }
        Op::Reshape(a, shape) => {
            let a = val(*a);
            a.clone().reshaped(shape).ok_or_else(|| format!("{:?} into {shape:?}", a.shape()))?
        }
        Op::Interp1d { table, positions } => {
            let (t, p) = (val(*table), val(*positions));
            let (len, f) = rank2(t)?;
            let (g, one) = rank2(p)?;
            if one != 1 {
                return Err(format!("positions must be [G, 1], got {:?}", p.shape()).into());
            }
            if p.data().iter().any(|v| v.is_nan()) {
                return Err(FwdError::Invalid("NaN sampling position".into()));
            }
            let mut data = vec![T::zero(); g * f];
            for (gi, &pos) in p.data().iter().enumerate() {
                let (i0, frac, _) = interp_coords(pos, len);
                let out = &mut data[gi * f..(gi + 1) * f];
                let lo = t.row_slice(i0);
                if len == 1 {
                    out.copy_from_slice(lo);
                    continue;
                }
                let hi = t.row_slice(i0 + 1);
                for c in 0..f {
                    out[c] = (T::one() - frac) * lo[c] + frac * hi[c];
                }
            }
            Tensor::from_vec(&[g, f], data)
        }
        Op::SumAll(a) => Tensor::scalar(val(*a).data().iter().copied().sum()),
        Op::MeanAll(a) => {
            let a = val(*a);
            Tensor::scalar(a.data().iter().copied().sum::<T>() / T::of_usize(a.len()))
        }
        Op::SumCols(a) => {
            let a = val(*a);
            let (m, n) = rank2(a)?;
            Tensor::from_vec(&[m, 1], a.data().chunks(n).map(|r| r.iter().copied().sum()).collect())
        }
        Op::MeanRows(a) => {
            let a = val(*a);
            let (m, n) = rank2(a)?;
            let mut out = vec![T::zero(); n];
            for row in a.data().chunks(n) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let mt = T::of_usize(m);
            Tensor::from_vec(&[1, n], out.into_iter().map(|v| v / mt).collect())
        }
        Op::MaskRows { input, token, mask } => {
            let (x, tok) = (val(*input), val(*token));
            let (m, n) = rank2(x)?;
            if tok.len() != n {
                return Err(format!("token of {} elements for rows of width {n}", tok.len()).into());
            }
            if mask.len() != m {
                return Err(format!("mask of length {} for {m} rows", mask.len()).into());
            }
            let mut out = x.clone();
            for (row, &on) in out.data_mut().chunks_mut(n).zip(mask) {
                if on {
                    row.copy_from_slice(tok.data());
                }
            }
            out
        }
        Op::Conv2d { input, weight, bias, stride, pad } => {
            let (x, w, b) = (val(*input), val(*weight), val(*bias));
            let [c, h, wd] = *x.shape() else {
                return Err(format!("conv input must be [C, H, W], got {:?}", x.shape()).into());
            };
            let [o, c2, k, k2] = *w.shape() else {
                return Err(format!("conv weight must be [O, C, k, k], got {:?}", w.shape()).into());
            };
            if c != c2 || k != k2 || b.len() != o || *stride == 0 {
                return Err(format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()).into());
            }
            let (Some(ho), Some(wo)) = (conv_out_extent(h, k, *stride, *pad), conv_out_extent(wd, k, *stride, *pad))
            else {
                return Err(format!("kernel {k} larger than padded input {h}x{wd}").into());
            };
            let geo = ConvGeom { c, h, w: wd, k, ho, wo, stride: *stride, pad: *pad };
            Tensor::from_vec(&[o, ho, wo], conv_forward(x.data(), w.data(), b.data(), o, geo))
        }
        Op::SpatialMean(a) => {
            let a = val(*a);
            let [c, h, w] = *a.shape() else {
                return Err(format!("expected [C, H, W], got {:?}", a.shape()).into());
            };
            let hw = T::of_usize(h * w);
            Tensor::from_vec(&[1, c], a.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect())
        }
        Op::Detached(a, f) => f(val(*a)).map_err(FwdError::Invalid)?,
    };
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
/// Geometry of one convolution: input `[c, h, w]`, `o` kernels of `k x k`,
/// output `[o, ho, wo]`.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Calls `f(column_index, input_index)` for every in-bounds patch entry.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.ho * self.wo;
        for ic in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ic * self.k + ky) * self.k + kx) * p;
                    for y in 0..self.ho {
                        let Some(iy) = (y * self.stride + ky).checked_sub(self.pad).filter(|&v| v < self.h) else {
                            continue;
                        };
                        let base = (ic * self.h + iy) * self.w;
                        for x in 0..self.wo {
                            if let Some(ix) = (x * self.stride + kx).checked_sub(self.pad).filter(|&v| v < self.w) {
                                f(row + y * self.wo + x, base + ix);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds the input into `[c * k * k, ho * wo]` patch columns.
fn im2col<T: Scalar>(x: &[T], geo: ConvGeom) -> Vec<T> {
    let mut col = vec![T::zero(); geo.c * geo.k * geo.k * geo.ho * geo.wo];
    geo.for_each_tap(|ci, xi| col[ci] = x[xi]);
    col
}

/// Scatters patch-column gradients back onto the input.
fn col2im<T: Scalar>(dcol: &[T], geo: ConvGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); geo.c * geo.h * geo.w];
    geo.for_each_tap(|ci, xi| dx[xi] += dcol[ci]);
    dx
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], o: usize, geo: ConvGeom) -> Vec<T> {
    let p = geo.ho * geo.wo;
    let col = im2col(x, geo);
    let mut out = matmul_raw(w, &col, o, geo.c * geo.k * geo.k, p);
    for (plane, &bv) in out.chunks_mut(p).zip(b) {
        plane.iter_mut().for_each(|v| *v += bv);
    }
    out
}

/// Adjoint rule: gradient contributions to each differentiable parent.
fn adjoint<'a, T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
    val: impl Fn(Var) -> &'a Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    match op {
        Op::Leaf | Op::Detached(..) => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let (gd, ki, ni) = (g.data(), k as isize, n as isize);
            vec![
                (*a, Tensor::from_vec(&[m, k], gemm_strided(m, n, k, (gd, ni, 1), (bv.data(), 1, ni)))),
                (*b, Tensor::from_vec(&[k, n], gemm_strided(k, m, n, (av.data(), 1, ki), (gd, ni, 1)))),
            ]
        }
        Op::Transpose(a) => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            vec![(*a, Tensor::from_vec(&[c, r], transpose_raw(g.data(), r, c)))]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            vec![(*a, zip_map(g, val(*b), |x, y| x * y)), (*b, zip_map(g, val(*a), |x, y| x * y))]
        }
        Op::AddRowBias(a, b) => {
            let bv = val(*b);
            let n = bv.len();
            let mut db = vec![T::zero(); n];
            for row in g.data().chunks(n) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![(*a, g.clone()), (*b, Tensor::from_vec(bv.shape(), db))]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
        Op::AddScalar(a, _) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, zip_map(g, out, |x, y| x * y))],
        Op::Log(a) => vec![(*a, zip_map(g, val(*a), |x, y| x / y))],
        Op::Sqrt(a) => vec![(*a, zip_map(g, out, |x, y| x * T::of(0.5) / y))],
        Op::Tanh(a) => vec![(*a, zip_map(g, out, |x, y| x * (T::one() - y * y)))],
        Op::Silu(a) => vec![(
            *a,
            zip_map(g, val(*a), |gv, x| {
                let s = sigmoid(x);
                gv * (s + x * s * (T::one() - s))
            }),
        )],
        Op::SoftmaxRows(a) => {
            let n = out.cols();
            let mut d = g.clone();
            for (drow, prow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                let dot: T = drow.iter().zip(prow).map(|(&x, &p)| x * p).sum();
                for (dv, &p) in drow.iter_mut().zip(prow) {
                    *dv = p * (*dv - dot);
                }
            }
            vec![(*a, d)]
        }
        Op::LogSoftmaxRows(a) => {
            let n = out.cols();
            let mut d = g.clone();
            for (drow, lrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                let total: T = drow.iter().copied().sum();
                for (dv, &l) in drow.iter_mut().zip(lrow) {
                    *dv -= l.exp() * total;
                }
            }
            vec![(*a, d)]
        }
        Op::L2NormalizeRows(a) => {
            let av = val(*a);
            let n = out.cols();
            let mut d = g.clone();
            for ((drow, yrow), xrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)).zip(av.data().chunks(n)) {
                let norm = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                let dot: T = drow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                for (dv, &y) in drow.iter_mut().zip(yrow) {
                    *dv = (*dv - y * dot) / norm;
                }
            }
            vec![(*a, d)]
        }
        Op::LayerNormRows(a, eps) => {
            let av = val(*a);
            let n = out.cols();
            let nt = T::of_usize(n);
            let mut d = g.clone();
            for ((drow, yrow), xrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)).zip(av.data().chunks(n)) {
                let mean = xrow.iter().copied().sum::<T>() / nt;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                let inv = T::one() / (var + *eps).sqrt();
                let gmean = drow.iter().copied().sum::<T>() / nt;
                let gymean = drow.iter().zip(yrow).map(|(&x, &y)| x * y).sum::<T>() / nt;
                for (dv, &y) in drow.iter_mut().zip(yrow) {
                    *dv = inv * (*dv - gmean - y * gymean);
                }
            }
            vec![(*a, d)]
        }
        Op::ConcatRows(parts) => {
            let n = g.cols();
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let t = val(*p);
                    let len = t.len();
                    let piece = Tensor::from_vec(t.shape(), g.data()[offset * n..offset * n + len].to_vec());
                    offset += len / n;
                    (*p, piece)
                })
                .collect()
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let m = g.rows();
            let mut start = 0;
            parts
                .iter()
                .map(|p| {
                    let c = val(*p).cols();
                    let mut data = Vec::with_capacity(m * c);
                    for row in g.data().chunks(total) {
                        data.extend_from_slice(&row[start..start + c]);
                    }
                    start += c;
                    (*p, Tensor::from_vec(&[m, c], data))
                })
                .collect()
        }
        Op::SliceRows(a, s, _) => {
            let av = val(*a);
            let c = av.cols();
            let mut d = Tensor::zeros(av.shape());
            d.data_mut()[s * c..s * c + g.len()].copy_from_slice(g.data());
            vec![(*a, d)]
        }
        Op::SliceCols(a, s, e) => {
            let av = val(*a);
            let c = av.cols();
            let w = e - s;
            let mut d = Tensor::zeros(av.shape());
            for (drow, grow) in d.data_mut().chunks_mut(c).zip(g.data().chunks(w)) {
                drow[*s..*e].copy_from_slice(grow);
            }
            vec![(*a, d)]
        }
        Op::Reshape(a, _) => vec![(*a, Tensor::from_vec(val(*a).shape(), g.data().to_vec()))],
        Op::Interp1d { table, positions } => {
            let (t, p) = (val(*table), val(*positions));
            let (len, f) = (t.shape()[0], t.shape()[1]);
            let mut dt = Tensor::zeros(t.shape());
            let mut dp = vec![T::zero(); p.len()];
            for (gi, &pos) in p.data().iter().enumerate() {
                let grow = &g.data()[gi * f..(gi + 1) * f];
                let (i0, frac, inside) = interp_coords(pos, len);
                if len == 1 {
                    for (d, &gv) in dt.data_mut()[..f].iter_mut().zip(grow) {
                        *d += gv;
                    }
                    continue;
                }
                {
                    let lo = &mut dt.data_mut()[i0 * f..(i0 + 1) * f];
                    for (d, &gv) in lo.iter_mut().zip(grow) {
                        *d += (T::one() - frac) * gv;
                    }
                }
                {
                    let hi = &mut dt.data_mut()[(i0 + 1) * f..(i0 + 2) * f];
                    for (d, &gv) in hi.iter_mut().zip(grow) {
                        *d += frac * gv;
                    }
                }
                if inside {
                    let (lo, hi) = (t.row_slice(i0), t.row_slice(i0 + 1));
                    dp[gi] = (0..f).map(|c| grow[c] * (hi[c] - lo[c])).sum();
                }
            }
            vec![(*table, dt), (*positions, Tensor::from_vec(p.shape(), dp))]
        }
        Op::SumAll(a) => {
            let gv = g.data()[0];
            vec![(*a, Tensor::filled(val(*a).shape(), gv))]
        }
        Op::MeanAll(a) => {
            let av = val(*a);
            let gv = g.data()[0] / T::of_usize(av.len());
            vec![(*a, Tensor::filled(av.shape(), gv))]
        }
        Op::SumCols(a) => {
            let av = val(*a);
            let n = av.cols();
            let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect();
            vec![(*a, Tensor::from_vec(av.shape(), data))]
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let m = T::of_usize(av.rows());
            let row: Vec<T> = g.data().iter().map(|&v| v / m).collect();
            let data = (0..av.rows()).flat_map(|_| row.iter().copied()).collect();
            vec![(*a, Tensor::from_vec(av.shape(), data))]
        }
        Op::MaskRows { input, token, mask } => {
            let tok = val(*token);
            let n = tok.len();
            let mut dx = g.clone();
            let mut dtok = vec![T::zero(); n];
            for (row, &on) in dx.data_mut().chunks_mut(n).zip(mask) {
                if on {
                    for (d, v) in dtok.iter_mut().zip(row.iter_mut()) {
                        *d += *v;
                        *v = T::zero();
                    }
                }
            }
            vec![(*input, dx), (*token, Tensor::from_vec(tok.shape(), dtok))]
        }
        Op::Conv2d { input, weight, bias, stride, pad } => {
            let (x, w, b) = (val(*input), val(*weight), val(*bias));
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (o, k) = (w.shape()[0], w.shape()[2]);
            let (ho, wo) = (g.shape()[1], g.shape()[2]);
            let geo = ConvGeom { c, h, w: wd, k, ho, wo, stride: *stride, pad: *pad };
            let (p, ckk) = (ho * wo, c * k * k);
            let db: Vec<T> = g.data().chunks(p).map(|pl| pl.iter().copied().sum()).collect();
            let col = im2col(x.data(), geo);
            let dw = gemm_strided(o, p, ckk, (g.data(), p as isize, 1), (&col, 1, p as isize));
            let dcol = gemm_strided(ckk, o, p, (w.data(), 1, ckk as isize), (g.data(), p as isize, 1));
            let dx = col2im(&dcol, geo);
            vec![
                (*input, Tensor::from_vec(x.shape(), dx)),
                (*weight, Tensor::from_vec(w.shape(), dw)),
                (*bias, Tensor::from_vec(b.shape(), db)),
            ]
        }
        Op::SpatialMean(a) => {
            let av = val(*a);
            let (h, w) = (av.shape()[1], av.shape()[2]);
            let hw = T::of_usize(h * w);
            let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv / hw, h * w)).collect();
            vec![(*a, Tensor::from_vec(av.shape(), data))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec())
    }

    #[test]
    fn square_of_constant() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(2.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.scalar_value(y), Some(4.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[4.0]);
    }

    #[test]
    fn power_rule_at_three() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[6.0]);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[1, 2], &[3.0, 4.0]), false).unwrap();
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[1, 2], &[0.0, 0.0]), false).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[1, 2], &[1000.0, 1000.0]), false).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.5)).unwrap();
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0]);
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.5)).unwrap();
        let unused = g.param("u", t(&[1, 2], &[1.0, 2.0])).unwrap();
        let _dangling = g.exp(unused).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused), Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn matmul_shape_error_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(GraphError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::scalar(800.0), false).unwrap();
        let e = g.exp(a);
        assert!(matches!(e, Err(GraphError::NonFinite { node: 1, op: "exp" })));
    }

    #[test]
    fn backward_requires_scalar_and_fresh_values() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[1, 2], &[1.0, 2.0])).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(GraphError::NotScalar { .. })));
        let s = g.sum(y).unwrap();
        g.bind("x", t(&[1, 2], &[3.0, 4.0])).unwrap();
        assert_eq!(g.backward(s), Err(GraphError::NotEvaluated));
        let out = {
            g.mark_output("s", s);
            g.evaluate(&[]).unwrap()
        };
        assert_eq!(out["s"].data(), &[14.0]);
        g.backward(s).unwrap();
    }

    #[test]
    fn evaluate_is_bit_reproducible() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[1, 3], &[0.1, 0.7, -0.3]), false).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let l = g.log(s).unwrap();
        let m = g.mean(l).unwrap();
        g.mark_output("m", m);
        let a = g.evaluate(&[("x", t(&[1, 3], &[0.2, 0.1, 0.9]))]).unwrap();
        let b = g.evaluate(&[("x", t(&[1, 3], &[0.2, 0.1, 0.9]))]).unwrap();
        assert!(a["m"].bit_eq(&b["m"]));
    }

    #[test]
    fn mask_rows_token_gradient_counts_masked_rows() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let tok = g.param("tok", t(&[1, 2], &[9.0, 9.0])).unwrap();
        let m = g.mask_rows(x, tok, &[true, false, true]).unwrap();
        assert_eq!(g.value(m).data(), &[9.0, 9.0, 3.0, 4.0, 9.0, 9.0]);
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(tok).data(), &[2.0, 2.0]);
        assert_eq!(g.grad(x).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn detached_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0)).unwrap();
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0]);
        assert_eq!(g.grad(d).data(), &[0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::from_vec(&[1, 3, 3], (0..9).map(f64::from).collect()), false).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::from_vec(&[1, 1, 3, 3], k));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let y2 = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y2), &[1, 2, 2]);
        assert_eq!(g.value(y2).data(), &[0.0, 2.0, 6.0, 8.0]);
    }
}
