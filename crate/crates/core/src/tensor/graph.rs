//! Computation graph with gradients emitted as graph nodes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{Tensor, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub const DIV_EPS: f64 = 1e-12;
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct ConvAttrs {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone)]
pub enum Op {
    Const(Tensor),
    /// Mutable leaf (parameter or bound input).
    Leaf(Rc<RefCell<Tensor>>),
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Transpose,
    Conv2d(ConvAttrs),
    /// Adjoint of conv2d w.r.t. input; also serves as transposed convolution.
    ConvInputGrad(ConvAttrs, usize, usize),
    /// Adjoint of conv2d w.r.t. kernel; kh, kw recorded.
    ConvKernelGrad(ConvAttrs, usize, usize),
    Relu,
    /// Heaviside of the input; derivative defined as zero everywhere.
    Step,
    /// 1 where lhs >= rhs else 0; derivative zero.
    GeMask,
    Sigmoid,
    Exp,
    /// ln(max(x, 1e-12)); saturation flagged on clamp.
    Log,
    /// Sum trailing dims, keeping the first `n` dims.
    SumToPrefix(usize),
    /// Expand by appending trailing dims; input shape must be a prefix of target.
    Broadcast(Vec<usize>),
    /// Concatenate along axis 0.
    Concat,
    /// Slice along axis 0.
    Slice { start: usize, len: usize },
    Reshape(Vec<usize>),
    /// Maximum over all elements -> scalar.
    MaxAll,
    /// 1 at the first argmax position, 0 elsewhere; derivative zero.
    MaxMask,
    /// Identity forward, blocks gradient.
    Detach,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Leaf(_) => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::ConvInputGrad(..) => "conv_input_grad",
            Op::ConvKernelGrad(..) => "conv_kernel_grad",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::GeMask => "ge_mask",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::SumToPrefix(_) => "sum",
            Op::Broadcast(_) => "broadcast",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::MaxAll => "max",
            Op::MaxMask => "max_mask",
            Op::Detach => "detach",
        }
    }
}

struct NodeInner {
    id: u64,
    op: Op,
    inputs: Vec<Node>,
    shape: Vec<usize>,
}

/// Handle to a graph node. Cloning is cheap (Rc).
#[derive(Clone)]
pub struct Node {
    inner: Rc<NodeInner>,
}

#[allow(dead_code)]
fn same_shape(a: &Node, b: &Node, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

impl Node {
    fn mk(op: Op, inputs: Vec<Node>, shape: Vec<usize>) -> Node {
        Node {
            inner: Rc::new(NodeInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op,
                inputs,
                shape,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn op(&self) -> &Op {
        &self.inner.op
    }

    pub fn inputs(&self) -> &[Node] {
        &self.inner.inputs
    }

    pub fn constant(t: Tensor) -> Node {
        let shape = t.shape().to_vec();
        Node::mk(Op::Const(t), vec![], shape)
    }

    pub fn scalar(v: f64) -> Node {
        Node::constant(Tensor::scalar(v))
    }

    pub fn leaf(t: Tensor) -> Node {
        let shape = t.shape().to_vec();
        Node::mk(Op::Leaf(Rc::new(RefCell::new(t))), vec![], shape)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf(_))
    }

    /// Replace the value of a leaf node; shape must match.
    pub fn set_value(&self, t: Tensor) {
        match &self.inner.op {
            Op::Leaf(cell) => {
                assert_eq!(t.shape(), self.shape(), "set_value shape mismatch");
                *cell.borrow_mut() = t;
            }
            _ => panic!("set_value on non-leaf node"),
        }
    }

    pub fn leaf_value(&self) -> Tensor {
        match &self.inner.op {
            Op::Leaf(cell) => cell.borrow().clone(),
            _ => panic!("leaf_value on non-leaf node"),
        }
    }

    // ----- elementwise binary ops (scalar operands auto-broadcast) -----

    fn bin(op: Op, a: &Node, b: &Node) -> Node {
        let (a, b) = broadcast_pair(a, b, op.name());
        let shape = a.shape().to_vec();
        Node::mk(op, vec![a, b], shape)
    }

    pub fn add(&self, other: &Node) -> Node {
        Node::bin(Op::Add, self, other)
    }

    pub fn sub(&self, other: &Node) -> Node {
        Node::bin(Op::Sub, self, other)
    }

    pub fn mul(&self, other: &Node) -> Node {
        Node::bin(Op::Mul, self, other)
    }

    /// Elementwise division; denominators with |b| < 1e-12 saturate to ±1e-12.
    pub fn div(&self, other: &Node) -> Node {
        Node::bin(Op::Div, self, other)
    }

    pub fn ge_mask(&self, other: &Node) -> Node {
        Node::bin(Op::GeMask, self, other)
    }

    pub fn neg(&self) -> Node {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Node {
        self.mul(&Node::scalar(c))
    }

    pub fn add_scalar(&self, c: f64) -> Node {
        self.add(&Node::scalar(c))
    }

    // ----- linear algebra -----

    pub fn matmul(&self, other: &Node) -> Node {
        assert_eq!(self.shape().len(), 2, "matmul lhs rank");
        assert_eq!(other.shape().len(), 2, "matmul rhs rank");
        assert_eq!(self.shape()[1], other.shape()[0], "matmul inner dims");
        let shape = vec![self.shape()[0], other.shape()[1]];
        Node::mk(Op::Matmul, vec![self.clone(), other.clone()], shape)
    }

    pub fn transpose(&self) -> Node {
        assert_eq!(self.shape().len(), 2, "transpose rank");
        let shape = vec![self.shape()[1], self.shape()[0]];
        Node::mk(Op::Transpose, vec![self.clone()], shape)
    }

    /// 2-d convolution; input [ci,H,W], kernel [co,ci,kh,kw].
    pub fn conv2d(&self, kernel: &Node, stride: usize, pad: usize) -> Node {
        assert_eq!(self.shape().len(), 3, "conv2d input rank");
        assert_eq!(kernel.shape().len(), 4, "conv2d kernel rank");
        assert_eq!(self.shape()[0], kernel.shape()[1], "conv2d channels");
        assert_eq!(kernel.shape()[2], kernel.shape()[3], "conv2d square kernels only");
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let (ho, wo) = kernels::conv_out_hw(
            self.shape()[1],
            self.shape()[2],
            kernel.shape()[2],
            kernel.shape()[3],
            stride,
            pad,
        );
        let shape = vec![kernel.shape()[0], ho, wo];
        Node::mk(
            Op::Conv2d(ConvAttrs { stride, pad }),
            vec![self.clone(), kernel.clone()],
            shape,
        )
    }

    /// Transposed convolution: input [ci,H,W], kernel [ci,co,kh,kw],
    /// output [co, (H-1)*s - 2p + kh, (W-1)*s - 2p + kw].
    pub fn transposed_conv2d(&self, kernel: &Node, stride: usize, pad: usize) -> Node {
        assert_eq!(self.shape().len(), 3, "tconv input rank");
        assert_eq!(kernel.shape().len(), 4, "tconv kernel rank");
        assert_eq!(self.shape()[0], kernel.shape()[0], "tconv channels");
        assert_eq!(kernel.shape()[2], kernel.shape()[3], "tconv square kernels only");
        assert!(stride == 1 || stride == 2, "tconv stride must be 1 or 2");
        let kh = kernel.shape()[2];
        let ho = (self.shape()[1] - 1) * stride + kh - 2 * pad;
        let wo = (self.shape()[2] - 1) * stride + kh - 2 * pad;
        let shape = vec![kernel.shape()[1], ho, wo];
        Node::mk(
            Op::ConvInputGrad(ConvAttrs { stride, pad }, ho, wo),
            vec![self.clone(), kernel.clone()],
            shape,
        )
    }

    // ----- unaries -----

    fn unary(op: Op, x: &Node) -> Node {
        let shape = x.shape().to_vec();
        Node::mk(op, vec![x.clone()], shape)
    }

    pub fn relu(&self) -> Node {
        Node::unary(Op::Relu, self)
    }

    pub fn step(&self) -> Node {
        Node::unary(Op::Step, self)
    }

    pub fn sigmoid(&self) -> Node {
        Node::unary(Op::Sigmoid, self)
    }

    pub fn exp(&self) -> Node {
        Node::unary(Op::Exp, self)
    }

    pub fn log(&self) -> Node {
        Node::unary(Op::Log, self)
    }

    pub fn detach(&self) -> Node {
        Node::unary(Op::Detach, self)
    }

    // ----- reductions / shape -----

    /// Sum trailing dims, keeping the first `prefix_rank` dims.
    pub fn sum_to_prefix(&self, prefix_rank: usize) -> Node {
        assert!(prefix_rank <= self.shape().len());
        let shape = self.shape()[..prefix_rank].to_vec();
        Node::mk(Op::SumToPrefix(prefix_rank), vec![self.clone()], shape)
    }

    pub fn sum(&self) -> Node {
        self.sum_to_prefix(0)
    }

    pub fn mean(&self) -> Node {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcast by appending trailing dims; own shape must be a prefix of `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Node {
        assert!(
            shape.len() >= self.shape().len() && shape[..self.shape().len()] == *self.shape(),
            "broadcast: {:?} is not a prefix of {:?}",
            self.shape(),
            shape
        );
        Node::mk(Op::Broadcast(shape.to_vec()), vec![self.clone()], shape.to_vec())
    }

    pub fn concat(parts: &[Node]) -> Node {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = &parts[0].shape()[1..];
        let mut dim0 = 0;
        for p in parts {
            assert!(!p.shape().is_empty(), "concat needs rank >= 1");
            assert_eq!(&p.shape()[1..], tail, "concat trailing dims mismatch");
            dim0 += p.shape()[0];
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(tail);
        Node::mk(Op::Concat, parts.to_vec(), shape)
    }

    pub fn slice(&self, start: usize, len: usize) -> Node {
        assert!(!self.shape().is_empty(), "slice needs rank >= 1");
        assert!(start + len <= self.shape()[0], "slice out of range");
        let mut shape = vec![len];
        shape.extend_from_slice(&self.shape()[1..]);
        Node::mk(Op::Slice { start, len }, vec![self.clone()], shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Node {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape element count mismatch"
        );
        Node::mk(Op::Reshape(shape.to_vec()), vec![self.clone()], shape.to_vec())
    }

    pub fn max_all(&self) -> Node {
        Node::mk(Op::MaxAll, vec![self.clone()], vec![])
    }

    fn max_mask(&self) -> Node {
        Node::unary(Op::MaxMask, self)
    }

    // ----- composites -----

    pub fn sq_norm(&self) -> Node {
        self.mul(self).sum()
    }

    /// Numerically stable softmax over a rank-1 node.
    pub fn softmax(&self) -> Node {
        assert_eq!(self.shape().len(), 1, "softmax expects rank-1");
        let shifted = self.sub(&self.max_all().broadcast_to(self.shape()));
        let e = shifted.exp();
        e.div(&e.sum().broadcast_to(self.shape()))
    }

    pub fn abs(&self) -> Node {
        self.relu().add(&self.neg().relu())
    }
}

/// Elementwise max via a zero-derivative selection mask.
pub fn emax(a: &Node, b: &Node) -> Node {
    let m = a.ge_mask(b);
    let one_minus = Node::scalar(1.0).broadcast_to(m.shape()).sub(&m);
    m.mul(a).add(&one_minus.mul(b))
}

/// Elementwise min via a zero-derivative selection mask.
pub fn emin(a: &Node, b: &Node) -> Node {
    let m = a.ge_mask(b);
    let one_minus = Node::scalar(1.0).broadcast_to(m.shape()).sub(&m);
    m.mul(b).add(&one_minus.mul(a))
}

fn broadcast_pair(a: &Node, b: &Node, what: &str) -> (Node, Node) {
    if a.shape() == b.shape() {
        return (a.clone(), b.clone());
    }
    if a.numel() == 1 && a.shape().is_empty() {
        return (a.broadcast_to(b.shape()), b.clone());
    }
    if b.numel() == 1 && b.shape().is_empty() {
        return (a.clone(), b.broadcast_to(a.shape()));
    }
    panic!("{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Memoizing evaluator. Results are cached per node id, so feeding the same
/// evaluator a forward root and then gradient roots reuses shared work.
pub struct Evaluator {
    cache: HashMap<u64, Rc<Tensor>>,
    /// Set when a div/log argument was clamped.
    pub saturated: bool,
    /// When set, any non-finite intermediate is an error.
    pub strict_finite: bool,
}

impl Default for Evaluator {
    fn default() -> Self {
        Self::new()
    }
}

impl Evaluator {
    pub fn new() -> Evaluator {
        Evaluator { cache: HashMap::new(), saturated: false, strict_finite: false }
    }

    pub fn strict() -> Evaluator {
        Evaluator { cache: HashMap::new(), saturated: false, strict_finite: true }
    }

    pub fn eval(&mut self, root: &Node) -> Result<Rc<Tensor>, TensorError> {
        let mut stack: Vec<Node> = vec![root.clone()];
        while let Some(n) = stack.last().cloned() {
            if self.cache.contains_key(&n.id()) {
                stack.pop();
                continue;
            }
            let mut ready = true;
            for inp in n.inputs() {
                if !self.cache.contains_key(&inp.id()) {
                    stack.push(inp.clone());
                    ready = false;
                }
            }
            if !ready {
                continue;
            }
            let value = self.compute(&n)?;
            if self.strict_finite && !value.is_finite() {
                return Err(TensorError::NonFinite(n.op().name()));
            }
            self.cache.insert(n.id(), Rc::new(value));
            stack.pop();
        }
        Ok(self.cache.get(&root.id()).unwrap().clone())
    }

    /// Evaluate and return the scalar value of a single-element node.
    pub fn scalar(&mut self, root: &Node) -> Result<f64, TensorError> {
        Ok(self.eval(root)?.item())
    }

    fn input(&self, n: &Node, i: usize) -> Rc<Tensor> {
        self.cache.get(&n.inputs()[i].id()).unwrap().clone()
    }

    fn compute(&mut self, n: &Node) -> Result<Tensor, TensorError> {
        let t = match n.op() {
            Op::Const(t) => t.clone(),
            Op::Leaf(cell) => cell.borrow().clone(),
            Op::Add => self.input(n, 0).zip(&self.input(n, 1), |a, b| a + b),
            Op::Sub => self.input(n, 0).zip(&self.input(n, 1), |a, b| a - b),
            Op::Mul => self.input(n, 0).zip(&self.input(n, 1), |a, b| a * b),
            Op::Div => {
                let a = self.input(n, 0);
                let b = self.input(n, 1);
                let mut sat = false;
                let out = a.zip(&b, |x, y| {
                    let d = if y.abs() < DIV_EPS {
                        sat = true;
                        if y < 0.0 {
                            -DIV_EPS
                        } else {
                            DIV_EPS
                        }
                    } else {
                        y
                    };
                    x / d
                });
                self.saturated |= sat;
                out
            }
            Op::Matmul => kernels::matmul(&self.input(n, 0), &self.input(n, 1)),
            Op::Transpose => kernels::transpose2(&self.input(n, 0)),
            Op::Conv2d(a) => kernels::conv2d(&self.input(n, 0), &self.input(n, 1), a.stride, a.pad),
            Op::ConvInputGrad(a, h, w) => {
                kernels::conv_input_grad(&self.input(n, 0), &self.input(n, 1), a.stride, a.pad, *h, *w)
            }
            Op::ConvKernelGrad(a, kh, kw) => {
                kernels::conv_kernel_grad(&self.input(n, 0), &self.input(n, 1), a.stride, a.pad, *kh, *kw)
            }
            Op::Relu => self.input(n, 0).map(|v| v.max(0.0)),
            Op::Step => self.input(n, 0).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::GeMask => self.input(n, 0).zip(&self.input(n, 1), |a, b| if a >= b { 1.0 } else { 0.0 }),
            Op::Sigmoid => self.input(n, 0).map(|v| 1.0 / (1.0 + (-v).exp())),
            Op::Exp => self.input(n, 0).map(f64::exp),
            Op::Log => {
                let x = self.input(n, 0);
                let mut sat = false;
                let out = x.map(|v| {
                    if v < LOG_EPS {
                        sat = true;
                        LOG_EPS.ln()
                    } else {
                        v.ln()
                    }
                });
                self.saturated |= sat;
                out
            }
            Op::SumToPrefix(k) => {
                let x = self.input(n, 0);
                let prefix: usize = x.shape()[..*k].iter().product();
                let tail: usize = x.shape()[*k..].iter().product();
                let mut out = vec![0.0; prefix];
                for i in 0..prefix {
                    let mut acc = 0.0;
                    for j in 0..tail {
                        acc += x.data()[i * tail + j];
                    }
                    out[i] = acc;
                }
                Tensor::new(&x.shape()[..*k], out)
            }
            Op::Broadcast(shape) => {
                let x = self.input(n, 0);
                let prefix = x.numel();
                let tail: usize = shape[x.rank()..].iter().product();
                let mut out = vec![0.0; prefix * tail];
                for i in 0..prefix {
                    let v = x.data()[i];
                    for j in 0..tail {
                        out[i * tail + j] = v;
                    }
                }
                Tensor::new(shape, out)
            }
            Op::Concat => {
                let mut data = Vec::with_capacity(n.numel());
                for i in 0..n.inputs().len() {
                    data.extend_from_slice(self.input(n, i).data());
                }
                Tensor::new(n.shape(), data)
            }
            Op::Slice { start, len } => {
                let x = self.input(n, 0);
                let row: usize = x.shape()[1..].iter().product();
                let data = x.data()[start * row..(start + len) * row].to_vec();
                Tensor::new(n.shape(), data)
            }
            Op::Reshape(shape) => {
                let x = self.input(n, 0);
                Tensor::new(shape, x.data().to_vec())
            }
            Op::MaxAll => {
                let x = self.input(n, 0);
                Tensor::scalar(x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            }
            Op::MaxMask => {
                let x = self.input(n, 0);
                let mut best = 0usize;
                for (i, &v) in x.data().iter().enumerate() {
                    if v > x.data()[best] {
                        best = i;
                    }
                }
                let mut out = vec![0.0; x.numel()];
                out[best] = 1.0;
                Tensor::new(x.shape(), out)
            }
            Op::Detach => self.input(n, 0).as_ref().clone(),
        };
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Map from node id to its adjoint node.
pub struct GradientMap {
    grads: HashMap<u64, Node>,
}

impl GradientMap {
    pub fn wrt(&self, n: &Node) -> Option<Node> {
        self.grads.get(&n.id()).cloned()
    }

    /// Gradient node, or a zero constant if the node is unreachable from the root.
    pub fn wrt_or_zero(&self, n: &Node) -> Node {
        self.wrt(n).unwrap_or_else(|| Node::constant(Tensor::zeros(n.shape())))
    }

    /// True if the node received no gradient (unreachable from the root).
    pub fn is_unreachable(&self, n: &Node) -> bool {
        !self.grads.contains_key(&n.id())
    }
}

/// Reverse-mode differentiation. Returns adjoint nodes for every node in the
/// graph reachable from `root`; the adjoints are ordinary graph nodes and can
/// be differentiated again.
pub fn backward(root: &Node, seed: &Node) -> GradientMap {
    assert_eq!(seed.shape(), root.shape(), "seed shape must equal root shape");
    // reverse topological order over the ancestors of root
    let order = topo_order(root);
    let mut grads: HashMap<u64, Node> = HashMap::new();
    grads.insert(root.id(), seed.clone());
    for n in order.iter().rev() {
        let g = match grads.get(&n.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        for (i, contrib) in vjp(n, &g).into_iter().enumerate() {
            if let Some(c) = contrib {
                let inp = &n.inputs()[i];
                match grads.get(&inp.id()) {
                    Some(existing) => {
                        let sum = existing.add(&c);
                        grads.insert(inp.id(), sum);
                    }
                    None => {
                        grads.insert(inp.id(), c);
                    }
                }
            }
        }
    }
    GradientMap { grads }
}

/// Convenience: backward from a scalar root with seed 1.
pub fn backward_scalar(root: &Node) -> GradientMap {
    assert_eq!(root.numel(), 1, "backward_scalar expects a scalar root");
    backward(root, &Node::constant(Tensor::full(root.shape(), 1.0)))
}

fn topo_order(root: &Node) -> Vec<Node> {
    let mut order = Vec::new();
    let mut state: HashMap<u64, u8> = HashMap::new(); // 1 = visiting, 2 = done
    let mut stack: Vec<(Node, bool)> = vec![(root.clone(), false)];
    while let Some((n, expanded)) = stack.pop() {
        if expanded {
            state.insert(n.id(), 2);
            order.push(n);
            continue;
        }
        match state.get(&n.id()) {
            Some(2) => continue,
            Some(1) => continue,
            _ => {}
        }
        state.insert(n.id(), 1);
        stack.push((n.clone(), true));
        for inp in n.inputs() {
            if !matches!(state.get(&inp.id()), Some(2)) {
                stack.push((inp.clone(), false));
            }
        }
    }
    order
}

fn ones_like(n: &Node) -> Node {
    Node::constant(Tensor::full(n.shape(), 1.0))
}

/// Per-op vector-Jacobian products, expressed as graph construction.
fn vjp(n: &Node, g: &Node) -> Vec<Option<Node>> {
    let ins = n.inputs();
    match n.op() {
        Op::Const(_) | Op::Leaf(_) => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.neg())],
        Op::Mul => vec![Some(g.mul(&ins[1])), Some(g.mul(&ins[0]))],
        Op::Div => {
            // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2 (with the same clamping)
            let ga = g.div(&ins[1]);
            let gb = g.mul(&ins[0]).div(&ins[1].mul(&ins[1])).neg();
            vec![Some(ga), Some(gb)]
        }
        Op::Matmul => vec![
            Some(g.matmul(&ins[1].transpose())),
            Some(ins[0].transpose().matmul(g)),
        ],
        Op::Transpose => vec![Some(g.transpose())],
        Op::Conv2d(a) => {
            let x = &ins[0];
            let k = &ins[1];
            let gx = Node::mk(
                Op::ConvInputGrad(*a, x.shape()[1], x.shape()[2]),
                vec![g.clone(), k.clone()],
                x.shape().to_vec(),
            );
            let gk = Node::mk(
                Op::ConvKernelGrad(*a, k.shape()[2], k.shape()[3]),
                vec![g.clone(), x.clone()],
                k.shape().to_vec(),
            );
            vec![Some(gx), Some(gk)]
        }
        Op::ConvInputGrad(a, ..) => {
            // n = CIG(y, k); <h, CIG(y,k)> = <conv(h,k), y>
            let y = &ins[0];
            let k = &ins[1];
            let gy = Node::mk(Op::Conv2d(*a), vec![g.clone(), k.clone()], y.shape().to_vec());
            let gk = Node::mk(
                Op::ConvKernelGrad(*a, k.shape()[2], k.shape()[3]),
                vec![y.clone(), g.clone()],
                k.shape().to_vec(),
            );
            vec![Some(gy), Some(gk)]
        }
        Op::ConvKernelGrad(a, ..) => {
            // n = CKG(y, x); <h, CKG(y,x)> = <conv(x,h), y>
            let y = &ins[0];
            let x = &ins[1];
            let gy = Node::mk(Op::Conv2d(*a), vec![x.clone(), g.clone()], y.shape().to_vec());
            let gx = Node::mk(
                Op::ConvInputGrad(*a, x.shape()[1], x.shape()[2]),
                vec![y.clone(), g.clone()],
                x.shape().to_vec(),
            );
            vec![Some(gy), Some(gx)]
        }
        Op::Relu => vec![Some(g.mul(&ins[0].step()))],
        Op::Step | Op::GeMask | Op::MaxMask | Op::Detach => {
            vec![None; ins.len()]
        }
        Op::Sigmoid => {
            // y' = y (1 - y), reusing the forward node
            let y = n.clone();
            vec![Some(g.mul(&y).mul(&ones_like(&y).sub(&y)))]
        }
        Op::Exp => vec![Some(g.mul(n))],
        Op::Log => vec![Some(g.div(&ins[0]))],
        Op::SumToPrefix(_) => vec![Some(g.broadcast_to(ins[0].shape()))],
        Op::Broadcast(_) => vec![Some(g.sum_to_prefix(ins[0].shape().len()))],
        Op::Concat => {
            let mut out = Vec::with_capacity(ins.len());
            let mut off = 0;
            for inp in ins {
                out.push(Some(g.slice(off, inp.shape()[0])));
                off += inp.shape()[0];
            }
            out
        }
        Op::Slice { start, len } => {
            let x = &ins[0];
            let d0 = x.shape()[0];
            let mut parts = Vec::new();
            if *start > 0 {
                let mut s = vec![*start];
                s.extend_from_slice(&x.shape()[1..]);
                parts.push(Node::constant(Tensor::zeros(&s)));
            }
            parts.push(g.clone());
            if start + len < d0 {
                let mut s = vec![d0 - start - len];
                s.extend_from_slice(&x.shape()[1..]);
                parts.push(Node::constant(Tensor::zeros(&s)));
            }
            vec![Some(Node::concat(&parts))]
        }
        Op::Reshape(_) => vec![Some(g.reshape(ins[0].shape()))],
        Op::MaxAll => vec![Some(g.broadcast_to(ins[0].shape()).mul(&ins[0].max_mask()))],
    }
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff_grad;
    use super::*;

    fn eval1(n: &Node) -> f64 {
        Evaluator::new().scalar(n).unwrap()
    }

    #[test]
    fn forward_square() {
        let x = Node::leaf(Tensor::scalar(3.0));
        let y = x.mul(&x);
        assert_eq!(eval1(&y), 9.0);
    }

    #[test]
    fn forward_softmax_symmetry() {
        let x = Node::constant(Tensor::from_vec(vec![0.0, 0.0]));
        let s = x.softmax();
        let v = Evaluator::new().eval(&s).unwrap();
        assert!((v.data()[0] - 0.5).abs() < 1e-15);
        assert!((v.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_is_pure() {
        let x = Node::leaf(Tensor::from_vec(vec![0.3, -1.2, 2.5]));
        let y = x.sigmoid().mul(&x.exp()).sum();
        let a = Evaluator::new().scalar(&y).unwrap();
        let b = Evaluator::new().scalar(&y).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn backward_square_and_sigmoid() {
        let x = Node::leaf(Tensor::scalar(3.0));
        let y = x.mul(&x);
        let g = backward_scalar(&y);
        assert_eq!(eval1(&g.wrt_or_zero(&x)), 6.0);

        let z = Node::leaf(Tensor::scalar(0.0));
        let s = z.sigmoid();
        let gs = backward_scalar(&s);
        assert!((eval1(&gs.wrt_or_zero(&z)) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_conv_matches_finite_differences() {
        let x = Node::constant(Tensor::new(
            &[1, 4, 4],
            (0..16).map(|i| ((i * 13 + 5) % 17) as f64 * 0.11 - 0.8).collect(),
        ));
        let k0 = Tensor::new(&[2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.23).sin() * 0.5).collect());
        let k = Node::leaf(k0.clone());
        let loss = x.conv2d(&k, 1, 1).sq_norm();
        let g = backward_scalar(&loss);
        let gk = Evaluator::new().eval(&g.wrt_or_zero(&k)).unwrap();

        let fd = finite_diff_grad(
            |t| {
                k.set_value(t.clone());
                let v = Evaluator::new().scalar(&loss).unwrap();
                v
            },
            &k0,
            1e-5,
        );
        k.set_value(k0);
        for (a, b) in gk.data().iter().zip(fd.data()) {
            let denom = a.abs().max(b.abs()).max(1e-6);
            assert!((a - b).abs() / denom < 1e-6, "conv grad {a} vs fd {b}");
        }
    }

    #[test]
    fn unreachable_leaf_is_zero_and_flagged() {
        let x = Node::leaf(Tensor::scalar(1.0));
        let y = Node::leaf(Tensor::scalar(2.0));
        let f = x.mul(&x);
        let g = backward_scalar(&f);
        assert!(g.is_unreachable(&y));
        assert_eq!(eval1(&g.wrt_or_zero(&y)), 0.0);
    }

    #[test]
    fn linearity_of_backward() {
        let x = Node::leaf(Tensor::from_vec(vec![0.7, -0.4, 1.9]));
        let f = x.sigmoid().sum();
        let h = x.exp().sum();
        let combo = f.scale(2.5).add(&h.scale(-1.25));
        let gc = backward_scalar(&combo).wrt_or_zero(&x);
        let gf = backward_scalar(&f).wrt_or_zero(&x);
        let gh = backward_scalar(&h).wrt_or_zero(&x);
        let want = gf.scale(2.5).add(&gh.scale(-1.25));
        let mut ev = Evaluator::new();
        let a = ev.eval(&gc).unwrap();
        let b = ev.eval(&want).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn double_backward_simple() {
        // f = x^3, f' = 3x^2, f'' = 6x
        let x = Node::leaf(Tensor::scalar(2.0));
        let f = x.mul(&x).mul(&x);
        let g1 = backward_scalar(&f).wrt_or_zero(&x);
        assert_eq!(eval1(&g1), 12.0);
        let g2 = backward_scalar(&g1).wrt_or_zero(&x);
        assert_eq!(eval1(&g2), 12.0); // 6x at x=2
    }

    #[test]
    fn relu_second_derivative_is_zero() {
        let x = Node::leaf(Tensor::scalar(1.5));
        let f = x.relu().mul(&x.relu()); // relu(x)^2
        let g1 = backward_scalar(&f).wrt_or_zero(&x);
        assert_eq!(eval1(&g1), 3.0);
        let g2 = backward_scalar(&g1).wrt_or_zero(&x);
        assert_eq!(eval1(&g2), 2.0); // 2*step(x)^2, step' == 0
    }

    #[test]
    fn div_saturation_flag() {
        let a = Node::constant(Tensor::scalar(1.0));
        let b = Node::constant(Tensor::scalar(0.0));
        let q = a.div(&b);
        let mut ev = Evaluator::new();
        let v = ev.scalar(&q).unwrap();
        assert!(ev.saturated);
        assert_eq!(v, 1e12);
    }

    #[test]
    fn emin_emax_values() {
        let a = Node::constant(Tensor::from_vec(vec![1.0, 5.0]));
        let b = Node::constant(Tensor::from_vec(vec![3.0, 2.0]));
        let mut ev = Evaluator::new();
        assert_eq!(ev.eval(&emax(&a, &b)).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(ev.eval(&emin(&a, &b)).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn tconv_upsamples_by_two() {
        let x = Node::constant(Tensor::full(&[3, 5, 5], 1.0));
        let k = Node::constant(Tensor::full(&[3, 2, 2, 2], 0.1));
        let y = x.transposed_conv2d(&k, 2, 0);
        assert_eq!(y.shape(), &[2, 10, 10]);
        let v = Evaluator::new().eval(&y).unwrap();
        // each output pixel touched by exactly one (input pixel, kernel tap) pair
        assert!(v.data().iter().all(|&u| (u - 0.3).abs() < 1e-12));
    }
}
