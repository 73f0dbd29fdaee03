//! Operation recording and the reverse sweep.
//!
//! Every op appends one node holding its output value, the handles of its
//! inputs, and whatever it saved for the backward rule. Nodes are only ever
//! appended, so the node order is a topological order and the reverse sweep is
//! a single pass from the loss down to index 0.

use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::ops::conv::ConvGeom;
use crate::ops::elementwise::BinKind;
use crate::ops::linalg::MatMulPlan;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: `(input values, output value, upstream grad)`
/// to one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>>>;

pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var },
    Scale { a: Var, c: T },
    Relu { a: Var },
    Gelu { a: Var },
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize>, row: usize },
    SumAll { a: Var },
    MeanAxis { a: Var, outer: usize, n: usize, inner: usize },
    Softmax { a: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax { a: Var, n: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<Option<usize>>, count: usize },
    SoftCrossEntropy { logits: Var, probs: Vec<T>, q: Vec<T>, rows: usize },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T>, channels: usize, spatial: usize, train: bool },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Single-owner record of a forward computation.
pub struct Tape<T: Element> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Records `t` by value.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push_leaf(shape, t.into_data(), requires_grad)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err(
                "constant",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape matches value")
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(dim_err("custom", format!("shape {:?} vs {} values", shape, value.len())));
        }
        Ok(self.push(shape.to_vec(), value, Op::Custom { inputs: inputs.to_vec(), backward }, inputs))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Gradient buffers start at zero on every call; only leaf gradients are
    /// kept in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink { grads: &mut grads, tape: self };
            self.backward_node(node, &g, &mut sink)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        use crate::ops::{conv, elementwise, linalg, nn, shape};
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => elementwise::binary_backward(self, *kind, *a, *b, g, sink),
            Op::Scale { a, c } => {
                if let Some(buf) = sink.buf(*a) {
                    buf.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *c);
                }
            }
            Op::Relu { a } => elementwise::relu_backward(self, *a, g, sink),
            Op::Gelu { a } => elementwise::gelu_backward(self, *a, g, sink),
            Op::MatMul { a, b, plan } => linalg::matmul_backward(self, *a, *b, plan, g, sink),
            Op::Reshape { a } => {
                if let Some(buf) = sink.buf(*a) {
                    buf.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                }
            }
            Op::Permute { a, perm } => shape::permute_backward(self, *a, perm, g, sink),
            Op::GatherRows { a, idx, row } => shape::gather_backward(*a, idx, *row, g, sink),
            Op::SumAll { a } => {
                if let Some(buf) = sink.buf(*a) {
                    buf.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::MeanAxis { a, outer, n, inner } => {
                shape::mean_axis_backward(*a, *outer, *n, *inner, g, sink)
            }
            Op::Softmax { a, outer, n, inner } => {
                nn::softmax_backward(*a, &node.value, *outer, *n, *inner, g, sink)
            }
            Op::LogSoftmax { a, n } => nn::log_softmax_backward(*a, &node.value, *n, g, sink),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                nn::layer_norm_backward(self, *x, *gain, *bias, xhat, rstd, g, sink)
            }
            Op::Dropout { a, mask } => {
                if let Some(buf) = sink.buf(*a) {
                    for ((d, &gv), &m) in buf.iter_mut().zip(g).zip(mask) {
                        *d = *d + gv * m;
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets, count } => {
                nn::cross_entropy_backward(*logits, probs, targets, *count, g, sink)
            }
            Op::SoftCrossEntropy { logits, probs, q, rows } => {
                nn::soft_cross_entropy_backward(*logits, probs, q, *rows, g, sink)
            }
            Op::Conv2d { input, weight, bias, geom } => {
                conv::conv2d_backward(self, *input, *weight, *bias, geom, g, sink)
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(buf) = sink.buf(*input) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        buf[src] = buf[src] + gv;
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv_std, channels, spatial, train } => {
                conv::batch_norm_backward(
                    self, *x, *gain, *bias, xhat, inv_std, *channels, *spatial, *train, g, sink,
                )
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&[T]> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(&values, &node.value, g);
                if grads.len() != inputs.len() {
                    return Err(dim_err(
                        "custom backward",
                        format!("{} gradients for {} inputs", grads.len(), inputs.len()),
                    ));
                }
                for (v, gi) in inputs.iter().zip(grads) {
                    if gi.len() != self.value(*v).len() {
                        return Err(dim_err(
                            "custom backward",
                            format!("gradient of {} elements for input {:?}", gi.len(), self.shape(*v)),
                        ));
                    }
                    if let Some(buf) = sink.buf(*v) {
                        buf.iter_mut().zip(&gi).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Accumulates per-node gradients during the reverse sweep.
pub(crate) struct GradSink<'a, T: Element> {
    grads: &'a mut [Option<Vec<T>>],
    tape: &'a Tape<T>,
}

impl<T: Element> GradSink<'_, T> {
    /// Zero-initialised accumulation buffer for `v`, or `None` when `v` takes no gradient.
    pub fn buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &self.tape.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }
}

/// Result of [`Tape::backward`]: gradients of the leaves reachable from the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`. A leaf the loss does not reach
    /// contributes zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => {
                if t.grad.is_none() {
                    t.zero_grad();
                }
                Ok(())
            }
        }
    }
}
