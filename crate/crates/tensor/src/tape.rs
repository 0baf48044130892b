//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Nodes whose inputs are all constants are recorded as plain
//! leaves, so gradient work is only ever done on the differentiable part of
//! the graph. `detach` inserts a fresh constant leaf sharing the value, which
//! is how stop-gradient is expressed.

use std::cell::RefCell;
use std::ops;
use std::sync::Arc;

use crate::kernels;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset2, numel, strides_of};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Neg,
    Abs,
    Square,
    Sqrt,
    Exp,
    Tanh,
    Gelu,
    LeakyRelu(f64),
    ClampMin(f64),
    Scale(f64),
    Offset(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow { a: usize, axis: usize, start: usize },
    Gather { a: usize, axis: usize, indices: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Sum(usize),
    SumAxis(usize, usize),
    Softmax(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Upsample(usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Narrow { a, .. }
            | Op::Gather { a, .. }
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Softmax(a)
            | Op::Upsample(a, _) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for a single backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when `var` does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.leaves.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), false)
    }

    /// A differentiable leaf (a trainable parameter or a probe input).
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(Arc::new(value), true)
    }

    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Marks every node from which `root` can be reached through
    /// differentiable edges.
    pub fn reachable(&self, root: Var<'_>) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut mark = vec![false; nodes.len()];
        if !nodes[root.id].requires_grad {
            return mark;
        }
        mark[root.id] = true;
        for id in (0..=root.id).rev() {
            if !mark[id] {
                continue;
            }
            for p in nodes[id].op.parents() {
                if nodes[p].requires_grad {
                    mark[p] = true;
                }
            }
        }
        mark
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward requires a single-element loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Gradients { leaves: grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, contribution: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), contribution.shape());
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (ga, gb) = binary_backward(*kind, av, bv, g);
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            let gx = unary_backward(*kind, x, out, g);
            accumulate(nodes, grads, *a, gx);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape());
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; batch * k * n];
            for t in 0..batch {
                let gs = &g.data()[t * m * n..(t + 1) * m * n];
                let asl = &av.data()[t * m * k..(t + 1) * m * k];
                let bsl = &bv.data()[t * k * n..(t + 1) * k * n];
                // dA = G · Bᵀ, dB = Aᵀ · G
                kernels::gemm(m, n, k, gs, false, bsl, true, &mut ga[t * m * k..(t + 1) * m * k]);
                kernels::gemm(k, m, n, asl, true, gs, false, &mut gb[t * k * n..(t + 1) * k * n]);
            }
            accumulate(nodes, grads, *a, Tensor::new(av.shape().to_vec(), ga).unwrap());
            accumulate(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
        }
        Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(nodes, grads, *a, g.reshape(shape).unwrap());
        }
        Op::Permute(a, perm) => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let in_strides = strides_of(&in_shape);
            let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut gx = vec![0.0; g.len()];
            for_each_offset2(out.shape(), &permuted, &permuted, |lin, off, _| {
                gx[off] = g.data()[lin];
            });
            accumulate(nodes, grads, *a, Tensor::new(in_shape, gx).unwrap());
        }
        Op::Narrow { a, axis, start } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let (outer, inner) = outer_inner(&in_shape, *axis);
            let len = out.shape()[*axis];
            let full = in_shape[*axis];
            let mut gx = vec![0.0; numel(&in_shape)];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * full + start) * inner;
                gx[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, *a, Tensor::new(in_shape, gx).unwrap());
        }
        Op::Gather { a, axis, indices } => {
            let in_shape = nodes[*a].value.shape().to_vec();
            let (outer, inner) = outer_inner(&in_shape, *axis);
            let full = in_shape[*axis];
            let mut gx = vec![0.0; numel(&in_shape)];
            for o in 0..outer {
                for (j, &src) in indices.iter().enumerate() {
                    let from = (o * indices.len() + j) * inner;
                    let to = (o * full + src) * inner;
                    for i in 0..inner {
                        gx[to + i] += g.data()[from + i];
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(in_shape, gx).unwrap());
        }
        Op::Concat { parts, axis } => {
            let (outer, inner) = outer_inner(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let shape = nodes[p].value.shape().to_vec();
                let len = shape[*axis];
                if nodes[p].requires_grad {
                    let mut gp = vec![0.0; numel(&shape)];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gp[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(shape, gp).unwrap());
                }
                offset += len;
            }
        }
        Op::Sum(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(nodes, grads, *a, Tensor::full(shape, g.item()));
        }
        Op::SumAxis(a, axis) => {
            let shape = nodes[*a].value.shape().to_vec();
            let (outer, inner) = outer_inner(&shape, *axis);
            let len = shape[*axis];
            let mut gx = vec![0.0; numel(&shape)];
            for o in 0..outer {
                for j in 0..len {
                    let dst = (o * len + j) * inner;
                    gx[dst..dst + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(shape, gx).unwrap());
        }
        Op::Softmax(a) => {
            let shape = out.shape().to_vec();
            let last = *shape.last().unwrap();
            let mut gx = vec![0.0; out.len()];
            for (row, (y, gy)) in out.data().chunks(last).zip(g.data().chunks(last)).enumerate() {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..last {
                    gx[row * last + j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(shape, gx).unwrap());
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let (gx, gw, gb) = kernels::conv2d_backward(xv, wv, g, *stride, *pad);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *w, gw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Upsample(a, factor) => {
            let shape = nodes[*a].value.shape().to_vec();
            let gx = kernels::upsample_nearest_backward(g, &shape, *factor);
            accumulate(nodes, grads, *a, gx);
        }
    }
}

fn binary_backward(kind: BinaryKind, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let shape = g.shape().to_vec();
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    for_each_offset2(&shape, &sa, &sb, |lin, ia, ib| {
        let gv = gd[lin];
        match kind {
            BinaryKind::Add => {
                ga[ia] += gv;
                gb[ib] += gv;
            }
            BinaryKind::Sub => {
                ga[ia] += gv;
                gb[ib] -= gv;
            }
            BinaryKind::Mul => {
                ga[ia] += gv * bd[ib];
                gb[ib] += gv * ad[ia];
            }
            BinaryKind::Div => {
                ga[ia] += gv / bd[ib];
                gb[ib] -= gv * ad[ia] / (bd[ib] * bd[ib]);
            }
        }
    });
    (
        Tensor::new(a.shape().to_vec(), ga).unwrap(),
        Tensor::new(b.shape().to_vec(), gb).unwrap(),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Gelu => gelu(x),
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        UnaryKind::ClampMin(m) => x.max(m),
        UnaryKind::Scale(s) => x * s,
        UnaryKind::Offset(c) => x + c,
    }
}

fn unary_backward(kind: UnaryKind, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&x, &y), &g)| match kind {
            UnaryKind::Neg => -g,
            UnaryKind::Abs => {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }
            UnaryKind::Square => 2.0 * x * g,
            UnaryKind::Sqrt => {
                if g == 0.0 {
                    0.0
                } else {
                    g * 0.5 / y
                }
            }
            UnaryKind::Exp => g * y,
            UnaryKind::Tanh => g * (1.0 - y * y),
            UnaryKind::Gelu => g * gelu_grad(x),
            UnaryKind::LeakyRelu(s) => {
                if x > 0.0 {
                    g
                } else {
                    s * g
                }
            }
            UnaryKind::ClampMin(m) => {
                if x > m {
                    g
                } else {
                    0.0
                }
            }
            UnaryKind::Scale(s) => g * s,
            UnaryKind::Offset(_) => g,
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    match (a.len(), b.len()) {
        (2, 2) => {
            assert_eq!(a[1], b[0], "matmul inner dims {a:?} x {b:?}");
            (1, a[0], a[1], b[1])
        }
        (3, 3) => {
            assert!(a[0] == b[0] && a[2] == b[1], "batched matmul dims {a:?} x {b:?}");
            (a[0], a[1], a[2], b[2])
        }
        _ => panic!("matmul supports 2-D or batched 3-D operands, got {a:?} x {b:?}"),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Stop-gradient: same value, no path back to the inputs.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value(), false)
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let (a, b) = (self.value(), other.value());
        let value = if a.shape() == b.shape() {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| apply_binary(kind, x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        } else {
            let shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
                panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())
            });
            let sa = broadcast_strides(a.shape(), &shape);
            let sb = broadcast_strides(b.shape(), &shape);
            let mut data = vec![0.0; numel(&shape)];
            let (ad, bd) = (a.data(), b.data());
            for_each_offset2(&shape, &sa, &sb, |lin, ia, ib| {
                data[lin] = apply_binary(kind, ad[ia], bd[ib]);
            });
            Tensor::new(shape, data).unwrap()
        };
        self.tape.push(value, Op::Binary(kind, self.id, other.id))
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let value = self.value().map(|x| unary_forward(kind, x));
        self.tape.push(value, Op::Unary(kind, self.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinaryKind::Add)
    }
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinaryKind::Sub)
    }
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinaryKind::Mul)
    }
    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinaryKind::Div)
    }
    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }
    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(UnaryKind::Gelu)
    }
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }
    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(UnaryKind::ClampMin(floor))
    }
    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(s))
    }
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Offset(c))
    }

    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n) = matmul_dims(a.shape(), b.shape());
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[t * m * k..(t + 1) * m * k],
                false,
                &b.data()[t * k * n..(t + 1) * k * n],
                false,
                &mut data[t * m * n..(t + 1) * m * n],
            );
        }
        let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.tape
            .push(Tensor::new(shape, data).unwrap(), Op::MatMul(self.id, other.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let value = self.value().reshape(shape.clone()).unwrap_or_else(|_| {
            panic!("cannot reshape {:?} to {:?}", self.shape(), shape)
        });
        self.tape.push(value, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(perm.len(), a.rank(), "permutation rank");
        let in_strides = strides_of(a.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
        let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = vec![0.0; a.len()];
        for_each_offset2(&out_shape, &permuted, &permuted, |lin, off, _| {
            data[lin] = a.data()[off];
        });
        self.tape.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::Permute(self.id, perm.to_vec()),
        )
    }

    /// Contiguous sub-range `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let shape = a.shape();
        assert!(start + len <= shape[axis], "narrow out of range on {shape:?}");
        let (outer, inner) = outer_inner(shape, axis);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&a.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::Narrow { a: self.id, axis, start },
        )
    }

    /// Selects `indices` (in order) along `axis`.
    pub fn gather(self, axis: usize, indices: &[usize]) -> Var<'t> {
        let a = self.value();
        let shape = a.shape();
        let full = shape[axis];
        assert!(indices.iter().all(|&i| i < full), "gather index out of range");
        let (outer, inner) = outer_inner(shape, axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * full + i) * inner;
                data.extend_from_slice(&a.data()[s..s + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        self.tape.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::Gather {
                a: self.id,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let tape = parts.first().expect("concat of nothing").tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            assert!(
                s.len() == first.len()
                    && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat shapes {first:?} vs {s:?}"
            );
            out_shape[axis] += s[axis];
        }
        let (outer, _) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let (_, inner) = outer_inner(v.shape(), axis);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        tape.push(
            Tensor::new(out_shape, data).unwrap(),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let a = self.value();
        let shape = a.shape();
        let (outer, inner) = outer_inner(shape, axis);
        let len = shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let s = (o * len + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += a.data()[s + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        self.tape
            .push(Tensor::new(out_shape, data).unwrap(), Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let last = *a.shape().last().expect("softmax of a scalar");
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        self.tape
            .push(Tensor::new(a.shape().to_vec(), data).unwrap(), Op::Softmax(self.id))
    }

    /// 2-D convolution of `[n,c,h,w]` with `[o,c,kh,kw]`, zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let value = kernels::conv2d_forward(&x, &w, b.as_deref(), stride, pad);
        self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                stride,
                pad,
            },
        )
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(self, factor: usize) -> Var<'t> {
        let value = kernels::upsample_nearest(&self.value(), factor);
        self.tape.push(value, Op::Upsample(self.id, factor))
    }
}

fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> ops::Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.offset(rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}
