use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::ops;
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

/// One recorded primitive. Indices refer to earlier tape nodes.
pub(crate) enum Op<F> {
    Leaf,
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddScalar { x: usize, s: usize },
    MulScalar { x: usize, s: usize },
    Recip(usize),
    Clamp { x: usize, lo: F, hi: F },
    Exp(usize),
    Log(usize),
    LogRatio(usize),
    Sqrt(usize),
    Square(usize),
    Gelu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<F>, rstd: Vec<F> },
    L2Normalize { x: usize, eps: F, norms: Vec<F> },
    TokenBroadcast { x: usize, lambda: Option<usize> },
    Linear { x: usize, w: usize, b: Option<usize> },
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Deconv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Gather { x: usize, index: Rc<[u32]> },
    Concat { inputs: Vec<usize>, axis: usize },
    AdaptiveAvgPool(usize),
    Bilinear(usize),
    MeanAxis { x: usize, axis: usize },
    OuterSum { rows: usize, cols: usize },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Recip(_) => "recip",
            Op::Clamp { .. } => "clamp",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LogRatio(_) => "log_ratio",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::TokenBroadcast { .. } => "token_broadcast",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::AdaptiveAvgPool(_) => "adaptive_avg_pool",
            Op::Bilinear(_) => "bilinear",
            Op::MeanAxis { .. } => "mean_axis",
            Op::OuterSum { .. } => "outer_sum",
        }
    }
}

pub(crate) struct Node<F> {
    pub shape: Vec<usize>,
    pub value: Rc<Vec<F>>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order and the backward pass is a single reverse sweep.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    scope: Cell<Option<&'static str>>,
    macs: RefCell<BTreeMap<&'static str, u64>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), scope: Cell::new(None), macs: RefCell::new(BTreeMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor as a leaf; it receives a gradient iff
    /// `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<F>) -> Var<'_, F> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a differentiable leaf.
    pub fn param(&self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var<'_, F>> {
        let shape = shape.into();
        check_len("param", &shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var<'_, F>> {
        let shape = shape.into();
        check_len("constant", &shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        self.push_rc(shape, Rc::new(value), op, requires_grad)
    }

    pub(crate) fn push_rc(&self, shape: Vec<usize>, value: Rc<Vec<F>>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Vec<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs `f` with multiply-accumulate counts attributed to `scope`.
    pub fn with_scope<R>(&self, scope: &'static str, f: impl FnOnce() -> R) -> R {
        let prev = self.scope.replace(Some(scope));
        let out = f();
        self.scope.set(prev);
        out
    }

    pub(crate) fn count_macs(&self, n: u64) {
        let mut macs = self.macs.borrow_mut();
        *macs.entry("total").or_default() += n;
        if let Some(s) = self.scope.get() {
            *macs.entry(s).or_default() += n;
        }
    }

    /// Multiply-accumulates recorded under `scope`; `"total"` counts all.
    pub fn macs(&self, scope: &str) -> u64 {
        self.macs.borrow().get(scope).copied().unwrap_or(0)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Argument("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut sink = GradSink { nodes: &nodes, grads: (0..nodes.len()).map(|_| None).collect() };
        if root.requires_grad {
            sink.grads[loss.id] = Some(vec![F::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = sink.grads[id].take() else { continue };
            let node = &nodes[id];
            ops::backward(&nodes, node, &g, &mut sink);
            sink.grads[id] = Some(g);
        }
        Ok(Gradients { grads: sink.grads })
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if numel(shape) != len {
        return Err(Error::dim(op, format!("shape {:?} vs {} values", shape, len)));
    }
    Ok(())
}

/// Accumulates gradient contributions during the reverse sweep; fan-out
/// contributions are summed.
pub(crate) struct GradSink<'a, F> {
    pub nodes: &'a [Node<F>],
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> GradSink<'_, F> {
    pub fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn add(&mut self, id: usize, g: &[F]) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_owned(&mut self, id: usize, g: Vec<F>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Mutable accumulator for `id`, zero-initialized on first touch.
    pub fn slot(&mut self, id: usize) -> Option<&mut Vec<F>> {
        if !self.wants(id) {
            return None;
        }
        let n = self.nodes[id].value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![F::zero(); n]))
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&[F]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_, F>) -> Vec<F> {
        self.get(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); v.numel()])
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<F>> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Copies the current value out as an owned tensor.
    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(self.shape(), self.value().to_vec()).expect("node shape is consistent")
    }

    /// The single element of a scalar value.
    pub fn item(&self) -> F {
        self.value()[0]
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, F>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Argument(format!("{op}: operands recorded on different tapes")))
        }
    }
}
