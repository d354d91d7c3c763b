//! Minimal tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Nodes are appended to a [`Graph`] in evaluation order, so node ids are a
//! topological order. [`Graph::grad`] walks the tape backwards and expresses
//! every adjoint with the same differentiable ops, appending new nodes as it
//! goes. Gradients are therefore themselves differentiable, which is what the
//! discriminator gradient penalty needs (a gradient of a gradient norm).
//!
//! The graph is single-threaded (`RefCell`); heavy kernels inside individual
//! ops (convolutions) parallelize over the batch.

use std::cell::RefCell;
use std::rc::Rc;

use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `scale * a + shift`, only the scale matters for gradients
    Affine(usize, f64),
    MulConst(usize, Rc<Tensor>),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Silu(usize),
    Abs(usize),
    Reshape(usize),
    Broadcast(usize),
    ReduceTo(usize),
    Concat(Vec<usize>),
    Slice1 { src: usize, start: usize },
    Embed1 { src: usize, start: usize },
    Conv(usize, usize),
    ConvInput(usize, usize),
    ConvWeight(usize, usize),
    AvgPool2(usize),
    Upsample2(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Conv(a, b) | ConvInput(a, b)
            | ConvWeight(a, b) => vec![*a, *b],
            Affine(a, ..) | MulConst(a, _) | Transpose(a) | Tanh(a) | Sigmoid(a)
            | Softplus(a) | Silu(a) | Abs(a) | Reshape(a) | Broadcast(a) | ReduceTo(a)
            | AvgPool2(a) | Upsample2(a) => vec![*a],
            Slice1 { src, .. } | Embed1 { src, .. } => vec![*src],
            Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// An append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf node. Parameters and constants are both leaves; whether a leaf
    /// receives a gradient is decided by the `wrt` list passed to [`grad`].
    ///
    /// [`grad`]: Graph::grad
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    fn push(&self, value: Rc<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    pub fn concat1(&self, parts: &[Var<'_>]) -> Var<'_> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let out = kernels::concat1(&values.iter().map(|v| v.as_ref()).collect::<Vec<_>>());
        self.push(Rc::new(out), Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Gradients of the scalar `out` with respect to each of `wrt`.
    ///
    /// The returned vars live on this graph and can be differentiated again.
    /// Inputs that `out` does not depend on get a zero gradient.
    pub fn grad<'g>(&'g self, out: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        assert_eq!(out.value().len(), 1, "grad needs a scalar output");
        let n = out.id + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..n].iter().map(|nd| nd.op.clone()).collect();

        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        for id in 0..n {
            if !relevant[id] {
                relevant[id] = ops[id].inputs().iter().any(|&i| relevant[i]);
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        grads[out.id] = Some(self.constant(Tensor::full(out.value().shape(), 1.0)));

        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let me = self.var(id);
            let mut send = |target: usize, contrib: &dyn Fn() -> Var<'g>| {
                if relevant[target] {
                    let c = contrib();
                    grads[target] = Some(match grads[target] {
                        Some(prev) => prev.add(c),
                        None => c,
                    });
                }
            };
            match &ops[id] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, &|| g);
                    send(*b, &|| g);
                }
                Op::Sub(a, b) => {
                    send(*a, &|| g);
                    send(*b, &|| g.neg());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.var(*a), self.var(*b));
                    send(*a, &|| g.mul(vb));
                    send(*b, &|| g.mul(va));
                }
                Op::Affine(a, scale) => send(*a, &|| g.scale(*scale)),
                Op::MulConst(a, c) => send(*a, &|| g.mul_const(c.clone())),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.var(*a), self.var(*b));
                    send(*a, &|| g.matmul(vb.t()));
                    send(*b, &|| va.t().matmul(g));
                }
                Op::Transpose(a) => send(*a, &|| g.t()),
                Op::Tanh(a) => send(*a, &|| g.mul(me.mul(me).affine(-1.0, 1.0))),
                Op::Sigmoid(a) => send(*a, &|| g.mul(me.mul(me.affine(-1.0, 1.0)))),
                Op::Softplus(a) => {
                    let va = self.var(*a);
                    send(*a, &|| g.mul(va.sigmoid()))
                }
                Op::Silu(a) => {
                    let va = self.var(*a);
                    send(*a, &|| {
                        let s = va.sigmoid();
                        // d/da [a s(a)] = s (1 + a (1 - s))
                        g.mul(s.mul(va.mul(s.affine(-1.0, 1.0)).affine(1.0, 1.0)))
                    })
                }
                Op::Abs(a) => {
                    let sign = self.value_of(*a).map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let sign = Rc::new(sign);
                    send(*a, &|| g.mul_const(sign.clone()))
                }
                Op::Reshape(a) => {
                    let shape = self.value_of(*a).shape().to_vec();
                    send(*a, &|| g.reshape(&shape))
                }
                Op::Broadcast(a) => {
                    let shape = self.value_of(*a).shape().to_vec();
                    send(*a, &|| g.reduce_to(&shape))
                }
                Op::ReduceTo(a) => {
                    let shape = self.value_of(*a).shape().to_vec();
                    send(*a, &|| g.broadcast(&shape))
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.value_of(p).shape()[1];
                        let s = start;
                        send(p, &|| g.slice1(s, width));
                        start += width;
                    }
                }
                Op::Slice1 { src, start } => {
                    let total = self.value_of(*src).shape()[1];
                    send(*src, &|| g.embed1(*start, total))
                }
                Op::Embed1 { src, start } => {
                    let width = self.value_of(*src).shape()[1];
                    send(*src, &|| g.slice1(*start, width))
                }
                Op::Conv(x, w) => {
                    let (vx, vw) = (self.var(*x), self.var(*w));
                    send(*x, &|| g.conv_input(vw, vx.value().shape()));
                    send(*w, &|| vx.conv_weight(g, vw.value().shape()));
                }
                Op::ConvInput(gy, w) => {
                    let (vg, vw) = (self.var(*gy), self.var(*w));
                    send(*gy, &|| g.conv2d(vw));
                    send(*w, &|| g.conv_weight(vg, vw.value().shape()));
                }
                Op::ConvWeight(x, gy) => {
                    let (vx, vg) = (self.var(*x), self.var(*gy));
                    send(*x, &|| vg.conv_input(g, vx.value().shape()));
                    send(*gy, &|| vx.conv2d(g));
                }
                Op::AvgPool2(a) => send(*a, &|| g.upsample2().scale(0.25)),
                Op::Upsample2(a) => send(*a, &|| g.avgpool2().scale(4.0)),
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect()
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// A new leaf holding the same value; gradients stop here.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf(self.value().as_ref().clone())
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let v = self.value().map(f);
        self.graph.push(Rc::new(v), op)
    }

    fn binary(&self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let v = a
            .zip_map(&b, f)
            .unwrap_or_else(|e| panic!("elementwise op: {e}"));
        self.graph.push(Rc::new(v), op)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn affine(self, scale: f64, shift: f64) -> Var<'g> {
        self.unary(Op::Affine(self.id, scale), |v| scale * v + shift)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.affine(s, 0.0)
    }

    pub fn neg(self) -> Var<'g> {
        self.affine(-1.0, 0.0)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, c: Rc<Tensor>) -> Var<'g> {
        let v = self
            .value()
            .zip_map(&c, |a, b| a * b)
            .unwrap_or_else(|e| panic!("mul_const: {e}"));
        self.graph.push(Rc::new(v), Op::MulConst(self.id, c))
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let v = kernels::matmul(&self.value(), &other.value());
        self.graph.push(Rc::new(v), Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'g> {
        let v = kernels::transpose(&self.value());
        self.graph.push(Rc::new(v), Op::Transpose(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(Op::Silu(self.id), |v| v * sigmoid(v))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self
            .value()
            .as_ref()
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.graph.push(Rc::new(v), Op::Reshape(self.id))
    }

    /// Broadcasts size-1 axes up to `shape` (same rank).
    pub fn broadcast(self, shape: &[usize]) -> Var<'g> {
        let v = kernels::broadcast(&self.value(), shape);
        self.graph.push(Rc::new(v), Op::Broadcast(self.id))
    }

    /// Sums axes down to `shape` (same rank, reduced axes have size 1).
    pub fn reduce_to(self, shape: &[usize]) -> Var<'g> {
        let v = kernels::reduce_to(&self.value(), shape);
        self.graph.push(Rc::new(v), Op::ReduceTo(self.id))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'g> {
        let ones = vec![1; self.value().rank()];
        self.reduce_to(&ones).reshape(&[])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-sample sum over all non-batch axes, shape `(batch,)`.
    pub fn sum_per_sample(self) -> Var<'g> {
        let shape = self.shape();
        let mut target = vec![1; shape.len()];
        target[0] = shape[0];
        self.reduce_to(&target).reshape(&[shape[0]])
    }

    /// Broadcasts a `(batch,)` vector of per-sample scalars over `shape`.
    pub fn expand_per_sample(self, shape: &[usize]) -> Var<'g> {
        let mut mid = vec![1; shape.len()];
        mid[0] = shape[0];
        self.reshape(&mid).broadcast(shape)
    }

    /// Columns `start..start + width` of axis 1.
    pub fn slice1(self, start: usize, width: usize) -> Var<'g> {
        let v = kernels::slice1(&self.value(), start, width);
        self.graph
            .push(Rc::new(v), Op::Slice1 { src: self.id, start })
    }

    /// Places this tensor at `start` of a zero tensor with `total` columns on
    /// axis 1.
    pub fn embed1(self, start: usize, total: usize) -> Var<'g> {
        let v = kernels::embed1(&self.value(), start, total);
        self.graph
            .push(Rc::new(v), Op::Embed1 { src: self.id, start })
    }

    /// Same-padded stride-1 2-D convolution of `(B, Ci, H, W)` with
    /// `(Co, Ci, k, k)` weights, `k` odd.
    pub fn conv2d(self, weight: Var<'g>) -> Var<'g> {
        let v = kernels::conv2d(&self.value(), &weight.value());
        self.graph.push(Rc::new(v), Op::Conv(self.id, weight.id))
    }

    /// Adjoint of [`conv2d`](Var::conv2d) with respect to its input.
    pub fn conv_input(self, weight: Var<'g>, input_shape: &[usize]) -> Var<'g> {
        let v = kernels::conv_input(&self.value(), &weight.value(), input_shape);
        self.graph
            .push(Rc::new(v), Op::ConvInput(self.id, weight.id))
    }

    /// Adjoint of [`conv2d`](Var::conv2d) with respect to its weight, with
    /// `self` the input and `gy` the output-side tensor.
    pub fn conv_weight(self, gy: Var<'g>, weight_shape: &[usize]) -> Var<'g> {
        let v = kernels::conv_weight(&self.value(), &gy.value(), weight_shape);
        self.graph
            .push(Rc::new(v), Op::ConvWeight(self.id, gy.id))
    }

    pub fn avgpool2(self) -> Var<'g> {
        let v = kernels::avgpool2(&self.value());
        self.graph.push(Rc::new(v), Op::AvgPool2(self.id))
    }

    pub fn upsample2(self) -> Var<'g> {
        let v = kernels::upsample2(&self.value());
        self.graph.push(Rc::new(v), Op::Upsample2(self.id))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Raw numeric kernels behind the ops.
pub mod kernels {
    use super::*;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        Tensor::new(vec![m, n], out).expect("matmul shape")
    }

    /// `c = beta c + op(a) op(b)` with row-major operands; `ta`/`tb` read the
    /// stored matrix as transposed.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        ta: bool,
        b: &[f64],
        tb: bool,
        c: &mut [f64],
        beta: f64,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // Strides for row-major op(a): m x k, op(b): k x n.
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: the asserts above bound every index the kernel touches.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn transpose(a: &Tensor) -> Tensor {
        let s = a.shape();
        assert_eq!(s.len(), 2, "transpose needs a matrix");
        let (m, n) = (s[0], s[1]);
        let d = a.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out).expect("transpose shape")
    }

    fn strides(shape: &[usize]) -> Vec<usize> {
        let mut s = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    }

    /// For every element of `big`, the flat index of the element of `small`
    /// it maps to under broadcasting.
    fn broadcast_index(small: &[usize], big: &[usize]) -> Vec<usize> {
        assert_eq!(small.len(), big.len(), "broadcast rank {small:?} vs {big:?}");
        for (s, b) in small.iter().zip(big) {
            assert!(*s == *b || *s == 1, "cannot broadcast {small:?} to {big:?}");
        }
        let ss = strides(small);
        let eff: Vec<usize> = small
            .iter()
            .zip(&ss)
            .map(|(&d, &st)| if d == 1 { 0 } else { st })
            .collect();
        let n: usize = big.iter().product();
        let mut idx = vec![0usize; big.len()];
        let mut out = Vec::with_capacity(n);
        let mut flat = 0usize;
        for _ in 0..n {
            out.push(flat);
            for ax in (0..big.len()).rev() {
                idx[ax] += 1;
                flat += eff[ax];
                if idx[ax] < big[ax] {
                    break;
                }
                flat -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        out
    }

    pub fn broadcast(a: &Tensor, shape: &[usize]) -> Tensor {
        let map = broadcast_index(a.shape(), shape);
        let d = a.data();
        Tensor::new(shape.to_vec(), map.iter().map(|&i| d[i]).collect()).expect("broadcast")
    }

    pub fn reduce_to(a: &Tensor, shape: &[usize]) -> Tensor {
        let map = broadcast_index(shape, a.shape());
        let mut out = Tensor::zeros(shape);
        let o = out.data_mut();
        for (v, &i) in a.data().iter().zip(&map) {
            o[i] += v;
        }
        out
    }

    /// `(outer, cols, inner)` view of axis 1.
    fn axis1(shape: &[usize]) -> (usize, usize, usize) {
        assert!(shape.len() >= 2, "axis-1 op on rank {}", shape.len());
        (shape[0], shape[1], shape[2..].iter().product())
    }

    pub fn concat1(parts: &[&Tensor]) -> Tensor {
        let (outer, _, inner) = axis1(parts[0].shape());
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut shape = parts[0].shape().to_vec();
        shape[1] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for b in 0..outer {
            for p in parts {
                let (o, c, i) = axis1(p.shape());
                assert!(o == outer && i == inner, "concat shapes differ");
                out.extend_from_slice(&p.data()[b * c * i..(b + 1) * c * i]);
            }
        }
        Tensor::new(shape, out).expect("concat")
    }

    pub fn slice1(a: &Tensor, start: usize, width: usize) -> Tensor {
        let (outer, cols, inner) = axis1(a.shape());
        assert!(start + width <= cols, "slice out of range");
        let mut shape = a.shape().to_vec();
        shape[1] = width;
        let mut out = Vec::with_capacity(outer * width * inner);
        for b in 0..outer {
            let base = (b * cols + start) * inner;
            out.extend_from_slice(&a.data()[base..base + width * inner]);
        }
        Tensor::new(shape, out).expect("slice")
    }

    pub fn embed1(a: &Tensor, start: usize, total: usize) -> Tensor {
        let (outer, cols, inner) = axis1(a.shape());
        assert!(start + cols <= total, "embed out of range");
        let mut shape = a.shape().to_vec();
        shape[1] = total;
        let mut out = Tensor::zeros(&shape);
        let o = out.data_mut();
        for b in 0..outer {
            let dst = (b * total + start) * inner;
            o[dst..dst + cols * inner]
                .copy_from_slice(&a.data()[b * cols * inner..(b + 1) * cols * inner]);
        }
        out
    }

    struct ConvDims {
        batch: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        k: usize,
    }

    impl ConvDims {
        fn new(x: &[usize], w: &[usize]) -> Self {
            assert_eq!(x.len(), 4, "conv input must be (B, C, H, W), got {x:?}");
            assert_eq!(w.len(), 4, "conv weight must be (Co, Ci, k, k), got {w:?}");
            assert_eq!(x[1], w[1], "conv channels {x:?} vs {w:?}");
            assert!(w[2] == w[3] && w[2] % 2 == 1, "conv kernel must be square and odd");
            ConvDims {
                batch: x[0],
                cin: x[1],
                cout: w[0],
                h: x[2],
                w: x[3],
                k: w[2],
            }
        }

        fn rows(&self) -> usize {
            self.cin * self.k * self.k
        }

        fn pixels(&self) -> usize {
            self.h * self.w
        }
    }

    fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
        let (h, w, k) = (d.h as isize, d.w as isize, d.k);
        let pad = (k / 2) as isize;
        let hw = d.pixels();
        for ci in 0..d.cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for yy in 0..h {
                        let sy = yy + dy;
                        let line = &mut dst[(yy * w) as usize..((yy + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            line.fill(0.0);
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx + dx;
                            line[xx as usize] = if sx < 0 || sx >= w {
                                0.0
                            } else {
                                plane[(sy * w + sx) as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(col: &[f64], d: &ConvDims, x: &mut [f64]) {
        let (h, w, k) = (d.h as isize, d.w as isize, d.k);
        let pad = (k / 2) as isize;
        let hw = d.pixels();
        x.fill(0.0);
        for ci in 0..d.cin {
            let plane = &mut x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for yy in 0..h {
                        let sy = yy + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx + dx;
                            if sx >= 0 && sx < w {
                                plane[(sy * w + sx) as usize] += src[(yy * w + xx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn conv2d(x: &Tensor, weight: &Tensor) -> Tensor {
        let d = ConvDims::new(x.shape(), weight.shape());
        let (rows, hw) = (d.rows(), d.pixels());
        let mut out = Tensor::zeros(&[d.batch, d.cout, d.h, d.w]);
        parallel::for_each_chunk(out.data_mut(), d.cout * hw, |b, dst| {
            let mut col = vec![0.0; rows * hw];
            im2col(&x.data()[b * d.cin * hw..(b + 1) * d.cin * hw], &d, &mut col);
            gemm(d.cout, rows, hw, weight.data(), false, &col, false, dst, 0.0);
        });
        out
    }

    pub fn conv_input(gy: &Tensor, weight: &Tensor, input_shape: &[usize]) -> Tensor {
        let d = ConvDims::new(input_shape, weight.shape());
        assert_eq!(gy.shape(), &[d.batch, d.cout, d.h, d.w], "conv_input grad shape");
        let (rows, hw) = (d.rows(), d.pixels());
        let mut out = Tensor::zeros(input_shape);
        parallel::for_each_chunk(out.data_mut(), d.cin * hw, |b, dst| {
            let mut col = vec![0.0; rows * hw];
            let g = &gy.data()[b * d.cout * hw..(b + 1) * d.cout * hw];
            gemm(rows, d.cout, hw, weight.data(), true, g, false, &mut col, 0.0);
            col2im(&col, &d, dst);
        });
        out
    }

    pub fn conv_weight(x: &Tensor, gy: &Tensor, weight_shape: &[usize]) -> Tensor {
        let d = ConvDims::new(x.shape(), weight_shape);
        assert_eq!(gy.shape(), &[d.batch, d.cout, d.h, d.w], "conv_weight grad shape");
        let (rows, hw) = (d.rows(), d.pixels());
        let partials = parallel::map_range(d.batch, |b| {
            let mut col = vec![0.0; rows * hw];
            im2col(&x.data()[b * d.cin * hw..(b + 1) * d.cin * hw], &d, &mut col);
            let g = &gy.data()[b * d.cout * hw..(b + 1) * d.cout * hw];
            let mut part = vec![0.0; d.cout * rows];
            gemm(d.cout, hw, rows, g, false, &col, true, &mut part, 0.0);
            part
        });
        // Fixed-order reduction keeps the result independent of scheduling.
        let mut out = Tensor::zeros(weight_shape);
        for part in partials {
            for (o, p) in out.data_mut().iter_mut().zip(part) {
                *o += p;
            }
        }
        out
    }

    fn planes(shape: &[usize]) -> (usize, usize, usize) {
        assert_eq!(shape.len(), 4, "spatial op needs (B, C, H, W)");
        (shape[0] * shape[1], shape[2], shape[3])
    }

    pub fn avgpool2(a: &Tensor) -> Tensor {
        let (p, h, w) = planes(a.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut shape = a.shape().to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let mut out = Tensor::zeros(&shape);
        let (src, dst) = (a.data(), out.data_mut());
        for pl in 0..p {
            for y in 0..ho {
                for x in 0..wo {
                    let base = pl * h * w + 2 * y * w + 2 * x;
                    dst[pl * ho * wo + y * wo + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        out
    }

    pub fn upsample2(a: &Tensor) -> Tensor {
        let (p, h, w) = planes(a.shape());
        let (ho, wo) = (2 * h, 2 * w);
        let mut shape = a.shape().to_vec();
        shape[2] = ho;
        shape[3] = wo;
        let mut out = Tensor::zeros(&shape);
        let (src, dst) = (a.data(), out.data_mut());
        for pl in 0..p {
            for y in 0..ho {
                for x in 0..wo {
                    dst[pl * ho * wo + y * wo + x] = src[pl * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), lcg(n, seed)).unwrap()
    }

    /// Central-difference check of `f` at `inputs`.
    fn check_grad(inputs: &[Tensor], f: &dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>) {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.grad(out, &vars);
        let eval = |xs: &[Tensor]| {
            let g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
            f(&g, &vs).value().data()[0]
        };
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads[k].value();
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k}[{i}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[3, 4], 2);
        check_grad(&[a, b], &|_, v| {
            v[0].mul(v[1])
                .add(v[0].tanh())
                .sub(v[1].sigmoid())
                .add(v[0].silu().affine(0.7, 0.1))
                .add(v[1].softplus())
                .add(v[0].square().mul(v[1].abs()))
                .sum()
        });
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let x = rand_tensor(&[5, 3], 3);
        let w = rand_tensor(&[3, 4], 4);
        let b = rand_tensor(&[4], 5);
        check_grad(&[x, w, b], &|_, v| {
            let h = v[0].matmul(v[1]).add(v[2].reshape(&[1, 4]).broadcast(&[5, 4]));
            h.tanh().square().mean()
        });
    }

    #[test]
    fn concat_slice_grads() {
        let a = rand_tensor(&[2, 2, 3], 6);
        let b = rand_tensor(&[2, 1, 3], 7);
        check_grad(&[a, b], &|g, v| {
            let c = g.concat1(&[v[0], v[1]]);
            c.slice1(1, 2).square().sum().add(c.embed1(1, 5).tanh().sum())
        });
    }

    #[test]
    fn conv_and_pool_grads() {
        let x = rand_tensor(&[2, 2, 4, 4], 8);
        let w = rand_tensor(&[3, 2, 3, 3], 9);
        check_grad(&[x, w], &|_, v| {
            v[0].conv2d(v[1]).avgpool2().upsample2().silu().square().sum()
        });
    }

    #[test]
    fn conv_adjoints_are_transposes() {
        let x = rand_tensor(&[2, 3, 5, 5], 10);
        let w = rand_tensor(&[4, 3, 3, 3], 11);
        let gy = rand_tensor(&[2, 4, 5, 5], 12);
        let y = kernels::conv2d(&x, &w);
        let gx = kernels::conv_input(&gy, &w, x.shape());
        let gw = kernels::conv_weight(&x, &gy, w.shape());
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        // <conv(x, w), gy> = <x, gx> = <w, gw>
        let lhs = dot(&y, &gy);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-10);
        assert!((lhs - dot(&w, &gw)).abs() < 1e-10);
    }

    // Second order: d/dw of ||d out / d x||^2, the gradient-penalty path.
    #[test]
    fn gradient_of_gradient_norm() {
        let x = rand_tensor(&[2, 1, 4, 4], 13);
        let w = rand_tensor(&[2, 1, 3, 3], 14);
        let v = rand_tensor(&[4, 1], 15);
        check_grad(&[x, w, v], &|g, vars| {
            let xv = vars[0];
            let h = xv.conv2d(vars[1]).silu().avgpool2().reshape(&[2, 8]);
            let logits = h.slice1(0, 4).matmul(vars[2]).tanh().sum();
            let gx = g.grad(logits, &[xv])[0];
            gx.square().sum_per_sample().mean().add(vars[0].square().sum())
        });
    }

    #[test]
    fn unreachable_inputs_get_zero() {
        let g = Graph::new();
        let a = g.leaf(Tensor::full(&[2], 1.0));
        let b = g.leaf(Tensor::full(&[3], 2.0));
        let out = a.square().sum();
        let gr = g.grad(out, &[a, b]);
        assert_eq!(gr[0].value().data(), &[2.0, 2.0]);
        assert_eq!(gr[1].value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn stable_softplus() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
