use super::kernels::{self, ConvGeom, Mat};
use super::{ParamId, ParamStore, Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug)]
enum Unary<S> {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
    Relu,
    Neg,
    Square,
    Sqrt,
    Scale(S),
    Offset(S),
    SmoothL1(S),
    Powf(S),
}

enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Unary {
        x: usize,
        f: Unary<S>,
    },
    Sum {
        x: usize,
        axis: Option<usize>,
    },
    Mean {
        x: usize,
        axis: Option<usize>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<S>,
        eps: S,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<S>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<S>,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::IndexSelect { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A single-use recording of a forward computation.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation DAG.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    param_nodes: RefCell<HashMap<(u64, ParamId), usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    node: Vec<Option<Vec<S>>>,
    params: HashMap<(u64, ParamId), usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&[S]> {
        self.node.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Option<&[S]> {
        self.params
            .get(&(store.uid(), id))
            .and_then(|&n| self.node[n].as_deref())
    }

    /// Add these gradients into the `grad` slots of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        let uid = store.uid();
        for (&(u, id), &n) in &self.params {
            if u != uid {
                continue;
            }
            if let Some(g) = &self.node[n] {
                let p = store.get_mut(id);
                match &mut p.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                    None => p.grad = Some(g.clone()),
                }
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn var(&self, id: usize) -> Var<'_, S> {
        Var { graph: self, id }
    }

    fn push(&self, value: Tensor<S>, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        // Nothing upstream needs a gradient: drop the saved state.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        let id = nodes.len() - 1;
        drop(nodes);
        self.var(id)
    }

    /// Gradient-blocked input.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf)
    }

    /// Free input that receives a gradient.
    pub fn variable(&self, value: Tensor<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let id = nodes.len() - 1;
        drop(nodes);
        self.var(id)
    }

    /// Load a parameter. Repeated loads of the same parameter share one node
    /// so every use contributes to the same gradient. Frozen parameters enter
    /// as constants.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var<'_, S> {
        let key = (store.uid(), id);
        if let Some(&n) = self.param_nodes.borrow().get(&key) {
            return self.var(n);
        }
        let p = store.get(id);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
        });
        let n = nodes.len() - 1;
        drop(nodes);
        self.param_nodes.borrow_mut().insert(key, n);
        self.var(n)
    }

    /// Whether `id` from `store` was loaded into this graph as a
    /// gradient-receiving node.
    pub fn param_on_tape(&self, store: &ParamStore<S>, id: ParamId) -> bool {
        self.param_nodes
            .borrow()
            .get(&(store.uid(), id))
            .map(|&n| self.nodes.borrow()[n].requires_grad)
            .unwrap_or(false)
    }

    /// Whether any parameter of `store` was loaded at all.
    pub fn touches_store(&self, store: &ParamStore<S>) -> bool {
        let uid = store.uid();
        self.param_nodes.borrow().keys().any(|(u, _)| *u == uid)
    }

    pub fn concat(&self, xs: &[Var<'_, S>], axis: usize) -> TensorResult<Var<'_, S>> {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let nodes = self.nodes.borrow();
        let first = nodes[xs[0].id].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for x in xs {
            let s = nodes[x.id].value.shape();
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let t = &nodes[x.id].value;
                let d = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        drop(nodes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.iter().map(|x| x.id).collect(),
                axis,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> TensorResult<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let n_nodes = nodes.len();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..n_nodes).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![S::one()]);
        }
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, &mut grads, i, &g);
            grads[i] = Some(g);
        }
        let params = self.param_nodes.borrow().clone();
        Ok(Gradients { node: grads, params })
    }
}

fn grad_slot<'a, S: Scalar>(nodes: &[Node<S>], grads: &'a mut [Option<Vec<S>>], id: usize) -> Option<&'a mut Vec<S>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); n]))
}

#[inline]
fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x);
    (y, dy)
}

fn unary_forward<S: Scalar>(f: Unary<S>, x: S) -> S {
    match f {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => S::one() / (S::one() + (-x).exp()),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => gelu_parts(x).0,
        Unary::Relu => x.max(S::zero()),
        Unary::Neg => -x,
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Scale(c) => x * c,
        Unary::Offset(c) => x + c,
        Unary::SmoothL1(beta) => {
            let ax = x.abs();
            if ax < beta {
                S::of(0.5) * x * x / beta
            } else {
                ax - S::of(0.5) * beta
            }
        }
        Unary::Powf(p) => x.powf(p),
    }
}

fn unary_grad<S: Scalar>(f: Unary<S>, x: S, y: S) -> S {
    match f {
        Unary::Exp => y,
        Unary::Log => S::one() / x,
        Unary::Sigmoid => y * (S::one() - y),
        Unary::Tanh => S::one() - y * y,
        Unary::Gelu => gelu_parts(x).1,
        Unary::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Unary::Neg => -S::one(),
        Unary::Square => S::of(2.0) * x,
        Unary::Sqrt => S::of(0.5) / y,
        Unary::Scale(c) => c,
        Unary::Offset(_) => S::one(),
        Unary::SmoothL1(beta) => {
            if x.abs() < beta {
                x / beta
            } else if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        }
        Unary::Powf(p) => {
            if p == S::zero() {
                S::zero()
            } else {
                p * x.powf(p - S::one())
            }
        }
    }
}

fn backward_node<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], i: usize, g: &[S]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            trans_b,
            batch,
            m,
            k,
            n,
        } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let b_shared = nodes[b].value.rank() == 2 && batch == 1;
            if let Some(ga) = grad_slot(nodes, grads, a) {
                for bi in 0..batch {
                    let gi = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = if b_shared { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                    let bt = if trans_b {
                        Mat::new(bb, n, k)
                    } else {
                        Mat::transposed(bb, n, k)
                    };
                    kernels::gemm(Mat::new(gi, m, n), bt, &mut ga[bi * m * k..(bi + 1) * m * k], S::one());
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                for bi in 0..batch {
                    let gi = &g[bi * m * n..(bi + 1) * m * n];
                    let ai = &av[bi * m * k..(bi + 1) * m * k];
                    let dst = if b_shared {
                        &mut gb[..]
                    } else {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    };
                    if trans_b {
                        kernels::gemm(Mat::transposed(gi, n, m), Mat::new(ai, m, k), dst, S::one());
                    } else {
                        kernels::gemm(Mat::transposed(ai, k, m), Mat::new(gi, m, n), dst, S::one());
                    }
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                -S::one()
            } else {
                S::one()
            };
            let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
            let strides_a = kernels::broadcast_strides(sa, out.shape());
            let strides_b = kernels::broadcast_strides(sb, out.shape());
            if let Some(ga) = grad_slot(nodes, grads, a) {
                if sa == out.shape() {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                } else {
                    kernels::for_each_broadcast(out.shape(), &strides_a, &strides_b, |ia, _, io| ga[ia] += g[io]);
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                if sb == out.shape() {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * *y);
                } else {
                    kernels::for_each_broadcast(out.shape(), &strides_a, &strides_b, |_, ib, io| gb[ib] += sign * g[io]);
                }
            }
        }
        &Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let strides_a = kernels::broadcast_strides(ta.shape(), out.shape());
            let strides_b = kernels::broadcast_strides(tb.shape(), out.shape());
            let (da, db) = (ta.data(), tb.data());
            if let Some(ga) = grad_slot(nodes, grads, a) {
                kernels::for_each_broadcast(out.shape(), &strides_a, &strides_b, |ia, ib, io| ga[ia] += g[io] * db[ib]);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                kernels::for_each_broadcast(out.shape(), &strides_a, &strides_b, |ia, ib, io| gb[ib] += g[io] * da[ia]);
            }
        }
        &Op::Div(a, b) => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let strides_a = kernels::broadcast_strides(ta.shape(), out.shape());
            let strides_b = kernels::broadcast_strides(tb.shape(), out.shape());
            let (da, db) = (ta.data(), tb.data());
            if let Some(ga) = grad_slot(nodes, grads, a) {
                kernels::for_each_broadcast(out.shape(), &strides_a, &strides_b, |ia, ib, io| ga[ia] += g[io] / db[ib]);
            }
            if let Some(gb) = grad_slot(nodes, grads, b) {
                kernels::for_each_broadcast(out.shape(), &strides_a, &strides_b, |ia, ib, io| {
                    gb[ib] -= g[io] * da[ia] / (db[ib] * db[ib])
                });
            }
        }
        &Op::Unary { x, f } => {
            let xv = nodes[x].value.data();
            let yv = out.data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for j in 0..gx.len() {
                    gx[j] += g[j] * unary_grad(f, xv[j], yv[j]);
                }
            }
        }
        &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
            let is_mean = matches!(nodes[i].op, Op::Mean { .. });
            let shape = nodes[x].value.shape().to_vec();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                match axis {
                    None => {
                        let s = if is_mean { g[0] / S::of_usize(gx.len()) } else { g[0] };
                        gx.iter_mut().for_each(|v| *v += s);
                    }
                    Some(ax) => {
                        let outer: usize = shape[..ax].iter().product();
                        let dim = shape[ax];
                        let inner: usize = shape[ax + 1..].iter().product();
                        let scale = if is_mean { S::one() / S::of_usize(dim) } else { S::one() };
                        for o in 0..outer {
                            for d in 0..dim {
                                for j in 0..inner {
                                    gx[(o * dim + d) * inner + j] += g[o * inner + j] * scale;
                                }
                            }
                        }
                    }
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(gx) = grad_slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
        }
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            let back = kernels::permute(g, out.shape(), &inv);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                gx.iter_mut().zip(&back).for_each(|(a, b)| *a += *b);
            }
        }
        Op::Concat { xs, axis } => {
            let axis = *axis;
            let total = out.shape()[axis];
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let outer: usize = out.shape()[..axis].iter().product();
            let mut offset = 0;
            for &x in xs {
                let d = nodes[x].value.shape()[axis];
                if let Some(gx) = grad_slot(nodes, grads, x) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        let dst = &mut gx[o * d * inner..(o + 1) * d * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                    }
                }
                offset += d;
            }
        }
        &Op::Narrow { x, axis, start } => {
            let shape = nodes[x].value.shape().to_vec();
            let len = out.shape()[axis];
            let dim = shape[axis];
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut gx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                }
            }
        }
        Op::IndexSelect { x, axis, indices } => {
            let shape = nodes[*x].value.shape().to_vec();
            let dim = shape[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let k = indices.len();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let from = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let to = &mut gx[(o * dim + src) * inner..(o * dim + src + 1) * inner];
                        to.iter_mut().zip(from).for_each(|(a, b)| *a += *b);
                    }
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..axis].iter().product();
            let dim = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let y = out.data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |d: usize| (o * dim + d) * inner + j;
                        let s: S = (0..dim).map(|d| g[idx(d)] * y[idx(d)]).sum();
                        for d in 0..dim {
                            gx[idx(d)] += y[idx(d)] * (g[idx(d)] - s);
                        }
                    }
                }
            }
        }
        &Op::LogSoftmax { x } => {
            let dim = *out.shape().last().unwrap();
            let y = out.data();
            if let Some(gx) = grad_slot(nodes, grads, x) {
                for r in 0..y.len() / dim {
                    let gs: S = g[r * dim..(r + 1) * dim].iter().copied().sum();
                    for d in 0..dim {
                        let j = r * dim + d;
                        gx[j] += g[j] - y[j].exp() * gs;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let dim = *out.shape().last().unwrap();
            let rows = xhat.len() / dim;
            let gam = nodes[*gamma].value.data();
            if let Some(gg) = grad_slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for d in 0..dim {
                        gg[d] += g[r * dim + d] * xhat[r * dim + d];
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for d in 0..dim {
                        gb[d] += g[r * dim + d];
                    }
                }
            }
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let inv_n = S::one() / S::of_usize(dim);
                for r in 0..rows {
                    let gr = &g[r * dim..(r + 1) * dim];
                    let xr = &xhat[r * dim..(r + 1) * dim];
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for d in 0..dim {
                        let dxh = gr[d] * gam[d];
                        m1 += dxh;
                        m2 += dxh * xr[d];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for d in 0..dim {
                        let dxh = gr[d] * gam[d];
                        gx[r * dim + d] += rstd[r] * (dxh - m1 - xr[d] * m2);
                    }
                }
            }
        }
        Op::L2Normalize { x, norms, eps } => {
            let dim = *out.shape().last().unwrap();
            let y = out.data();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (r, &nrm) in norms.iter().enumerate() {
                    let gr = &g[r * dim..(r + 1) * dim];
                    let yr = &y[r * dim..(r + 1) * dim];
                    if nrm > *eps {
                        let dot: S = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for d in 0..dim {
                            gx[r * dim + d] += (gr[d] - yr[d] * dot) / nrm;
                        }
                    } else {
                        for d in 0..dim {
                            gx[r * dim + d] += gr[d] / *eps;
                        }
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            attention_backward(nodes, grads, (*q, *k, *v), *heads, probs, g);
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (ho, wo) = geom.out_hw();
            let np = ho * wo;
            let ckk = geom.col_rows();
            let oc = nodes[*w].value.shape()[0];
            let batch = nodes[*x].value.shape()[0];
            let wv = nodes[*w].value.data();
            if let Some(gw) = grad_slot(nodes, grads, *w) {
                for bi in 0..batch {
                    let gi = &g[bi * oc * np..(bi + 1) * oc * np];
                    let ci = &cols[bi * ckk * np..(bi + 1) * ckk * np];
                    kernels::gemm(Mat::new(gi, oc, np), Mat::transposed(ci, np, ckk), gw, S::one());
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for bi in 0..batch {
                    for o in 0..oc {
                        gb[o] += g[(bi * oc + o) * np..(bi * oc + o + 1) * np].iter().copied().sum();
                    }
                }
            }
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let img = geom.channels * geom.height * geom.width;
                let mut gcols = vec![S::zero(); ckk * np];
                for bi in 0..batch {
                    let gi = &g[bi * oc * np..(bi + 1) * oc * np];
                    kernels::gemm(Mat::transposed(wv, ckk, oc), Mat::new(gi, oc, np), &mut gcols, S::zero());
                    kernels::col2im(&gcols, geom, &mut gx[bi * img..(bi + 1) * img]);
                }
            }
        }
    }
}

/// Strided gemm over sub-blocks of flat buffers.
#[allow(clippy::too_many_arguments)]
fn gemm_block<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: (&[S], usize, isize, isize),
    b: (&[S], usize, isize, isize),
    beta: S,
    c: (&mut [S], usize, isize, isize),
) {
    fn last(off: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
        off + (rows - 1) * rs as usize + (cols - 1) * cs as usize
    }
    assert!(last(a.1, m, k, a.2, a.3) < a.0.len());
    assert!(last(b.1, k, n, b.2, b.3) < b.0.len());
    assert!(last(c.1, m, n, c.2, c.3) < c.0.len());
    // SAFETY: the last addressed element of each block is in bounds and all
    // strides are positive.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    (q, k, v): (usize, usize, usize),
    heads: usize,
    probs: &[S],
    g: &[S],
) {
    let qs = nodes[q].value.shape();
    let (batch, n, d) = (qs[0], qs[1], qs[2]);
    let m = nodes[k].value.shape()[1];
    let dh = d / heads;
    let scale = S::one() / S::of_usize(dh).sqrt();
    let (qv, kv, vv) = (nodes[q].value.data(), nodes[k].value.data(), nodes[v].value.data());
    let ds_all = {
        let mut ds = vec![S::zero(); probs.len()];
        let mut dp = vec![S::zero(); n * m];
        for b in 0..batch {
            for h in 0..heads {
                let pb = (b * heads + h) * n * m;
                // dP = dO · Vᵀ
                gemm_block(
                    n,
                    dh,
                    m,
                    S::one(),
                    (g, b * n * d + h * dh, d as isize, 1),
                    (vv, b * m * d + h * dh, 1, d as isize),
                    S::zero(),
                    (&mut dp, 0, m as isize, 1),
                );
                for r in 0..n {
                    let pr = &probs[pb + r * m..pb + (r + 1) * m];
                    let dpr = &dp[r * m..(r + 1) * m];
                    let s: S = pr.iter().zip(dpr).map(|(a, b)| *a * *b).sum();
                    for c in 0..m {
                        ds[pb + r * m + c] = pr[c] * (dpr[c] - s);
                    }
                }
            }
        }
        ds
    };
    if let Some(gq) = grad_slot(nodes, grads, q) {
        for b in 0..batch {
            for h in 0..heads {
                let pb = (b * heads + h) * n * m;
                gemm_block(
                    n,
                    m,
                    dh,
                    scale,
                    (&ds_all, pb, m as isize, 1),
                    (kv, b * m * d + h * dh, d as isize, 1),
                    S::one(),
                    (gq, b * n * d + h * dh, d as isize, 1),
                );
            }
        }
    }
    if let Some(gk) = grad_slot(nodes, grads, k) {
        for b in 0..batch {
            for h in 0..heads {
                let pb = (b * heads + h) * n * m;
                gemm_block(
                    m,
                    n,
                    dh,
                    scale,
                    (&ds_all, pb, 1, m as isize),
                    (qv, b * n * d + h * dh, d as isize, 1),
                    S::one(),
                    (gk, b * m * d + h * dh, d as isize, 1),
                );
            }
        }
    }
    if let Some(gv) = grad_slot(nodes, grads, v) {
        for b in 0..batch {
            for h in 0..heads {
                let pb = (b * heads + h) * n * m;
                gemm_block(
                    m,
                    n,
                    dh,
                    S::one(),
                    (probs, pb, 1, m as isize),
                    (g, b * n * d + h * dh, d as isize, 1),
                    S::one(),
                    (gv, b * m * d + h * dh, d as isize, 1),
                );
            }
        }
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    fn node_value(&self) -> Ref<'_, Tensor<S>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node_value().shape().to_vec()
    }

    pub fn value(&self) -> Tensor<S> {
        self.node_value().clone()
    }

    pub fn item(&self) -> S {
        self.node_value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient-blocked copy.
    pub fn detach(&self) -> Var<'g, S> {
        let v = self.value();
        self.graph.constant(v)
    }

    fn unary(&self, f: Unary<S>) -> Var<'g, S> {
        let value = {
            let t = self.node_value();
            Tensor {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&x| unary_forward(f, x)).collect(),
            }
        };
        self.graph.push(value, Op::Unary { x: self.id, f })
    }

    pub fn exp(&self) -> Var<'g, S> {
        self.unary(Unary::Exp)
    }
    pub fn ln(&self) -> Var<'g, S> {
        self.unary(Unary::Log)
    }
    pub fn sigmoid(&self) -> Var<'g, S> {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(&self) -> Var<'g, S> {
        self.unary(Unary::Tanh)
    }
    pub fn gelu(&self) -> Var<'g, S> {
        self.unary(Unary::Gelu)
    }
    pub fn relu(&self) -> Var<'g, S> {
        self.unary(Unary::Relu)
    }
    pub fn neg(&self) -> Var<'g, S> {
        self.unary(Unary::Neg)
    }
    pub fn square(&self) -> Var<'g, S> {
        self.unary(Unary::Square)
    }
    pub fn sqrt(&self) -> Var<'g, S> {
        self.unary(Unary::Sqrt)
    }
    pub fn scale(&self, c: f64) -> Var<'g, S> {
        self.unary(Unary::Scale(S::of(c)))
    }
    pub fn offset(&self, c: f64) -> Var<'g, S> {
        self.unary(Unary::Offset(S::of(c)))
    }
    /// Elementwise Huber-style smooth-L1 with transition point `beta`.
    pub fn smooth_l1(&self, beta: f64) -> Var<'g, S> {
        self.unary(Unary::SmoothL1(S::of(beta)))
    }
    pub fn powf(&self, p: f64) -> Var<'g, S> {
        self.unary(Unary::Powf(S::of(p)))
    }

    fn binary(&self, other: &Var<'g, S>, name: &'static str) -> TensorResult<Var<'g, S>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let f = |x: S, y: S| match name {
                "add" => x + y,
                "sub" => x - y,
                "mul" => x * y,
                _ => x / y,
            };
            if a.shape() == b.shape() {
                Tensor {
                    shape: a.shape().to_vec(),
                    data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
                }
            } else {
                let out = kernels::broadcast_shape(name, a.shape(), b.shape())?;
                let sa = kernels::broadcast_strides(a.shape(), &out);
                let sb = kernels::broadcast_strides(b.shape(), &out);
                let mut data = vec![S::zero(); out.iter().product()];
                let (da, db) = (a.data(), b.data());
                kernels::for_each_broadcast(&out, &sa, &sb, |ia, ib, io| data[io] = f(da[ia], db[ib]));
                Tensor { shape: out, data }
            }
        };
        let op = match name {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            "mul" => Op::Mul(self.id, other.id),
            _ => Op::Div(self.id, other.id),
        };
        Ok(self.graph.push(value, op))
    }

    pub fn add(&self, other: &Var<'g, S>) -> TensorResult<Var<'g, S>> {
        self.binary(other, "add")
    }
    pub fn sub(&self, other: &Var<'g, S>) -> TensorResult<Var<'g, S>> {
        self.binary(other, "sub")
    }
    pub fn mul(&self, other: &Var<'g, S>) -> TensorResult<Var<'g, S>> {
        self.binary(other, "mul")
    }
    pub fn div(&self, other: &Var<'g, S>) -> TensorResult<Var<'g, S>> {
        self.binary(other, "div")
    }

    fn mm(&self, other: &Var<'g, S>, trans_b: bool) -> TensorResult<Var<'g, S>> {
        let op_name = if trans_b { "matmul_t" } else { "matmul" };
        let (value, batch, m, k, n) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            let mismatch = || TensorError::ShapeMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            };
            if sa.len() < 2 || sb.len() < 2 {
                return Err(mismatch());
            }
            let k = sa[sa.len() - 1];
            let (bk, n) = if trans_b {
                (sb[sb.len() - 1], sb[sb.len() - 2])
            } else {
                (sb[sb.len() - 2], sb[sb.len() - 1])
            };
            if k != bk {
                return Err(mismatch());
            }
            let (batch, m) = if sb.len() == 2 {
                (1, a.numel() / k)
            } else {
                if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                    return Err(mismatch());
                }
                (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
            };
            let mut data = vec![S::zero(); batch * m * n];
            for bi in 0..batch {
                let ai = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bb = if sb.len() == 2 {
                    b.data()
                } else {
                    &b.data()[bi * k * n..(bi + 1) * k * n]
                };
                let bm = if trans_b {
                    Mat::transposed(bb, k, n)
                } else {
                    Mat::new(bb, k, n)
                };
                kernels::gemm(Mat::new(ai, m, k), bm, &mut data[bi * m * n..(bi + 1) * m * n], S::zero());
            }
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (Tensor { shape, data }, batch, m, k, n)
        };
        Ok(self.graph.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    /// Matrix product over the last two axes. `other` is either a rank-2
    /// matrix applied to every row of `self`, or a batch with the same
    /// leading dimensions.
    pub fn matmul(&self, other: &Var<'g, S>) -> TensorResult<Var<'g, S>> {
        self.mm(other, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_t(&self, other: &Var<'g, S>) -> TensorResult<Var<'g, S>> {
        self.mm(other, true)
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> TensorResult<Var<'g, S>> {
        let value = {
            let t = self.node_value();
            match axis {
                None => {
                    let s: S = t.data().iter().copied().sum();
                    Tensor::scalar(if mean { s / S::of_usize(t.numel()) } else { s })
                }
                Some(ax) => {
                    let (outer, dim, inner) = kernels::split_axis("reduce", t.shape(), ax)?;
                    let mut data = vec![S::zero(); outer * inner];
                    let d = t.data();
                    for o in 0..outer {
                        for k in 0..dim {
                            for j in 0..inner {
                                data[o * inner + j] += d[(o * dim + k) * inner + j];
                            }
                        }
                    }
                    if mean {
                        let c = S::one() / S::of_usize(dim);
                        data.iter_mut().for_each(|x| *x *= c);
                    }
                    let mut shape = t.shape().to_vec();
                    shape.remove(ax);
                    Tensor { shape, data }
                }
            }
        };
        let op = if mean {
            Op::Mean { x: self.id, axis }
        } else {
            Op::Sum { x: self.id, axis }
        };
        Ok(self.graph.push(value, op))
    }

    pub fn sum(&self) -> Var<'g, S> {
        self.reduce(None, false).expect("full reduction")
    }
    pub fn mean(&self) -> Var<'g, S> {
        self.reduce(None, true).expect("full reduction")
    }
    pub fn sum_axis(&self, axis: usize) -> TensorResult<Var<'g, S>> {
        self.reduce(Some(axis), false)
    }
    pub fn mean_axis(&self, axis: usize) -> TensorResult<Var<'g, S>> {
        self.reduce(Some(axis), true)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> TensorResult<Var<'g, S>> {
        let value = self.value().reshape(shape)?;
        Ok(self.graph.push(value, Op::Reshape { x: self.id }))
    }

    pub fn permute(&self, perm: &[usize]) -> TensorResult<Var<'g, S>> {
        let value = {
            let t = self.node_value();
            let mut sorted = perm.to_vec();
            sorted.sort_unstable();
            if perm.len() != t.rank() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(TensorError::Contract(format!("invalid permutation {perm:?} for rank {}", t.rank())));
            }
            let data = kernels::permute(t.data(), t.shape(), perm);
            let shape = perm.iter().map(|&p| t.shape()[p]).collect();
            Tensor { shape, data }
        };
        Ok(self.graph.push(
            value,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> TensorResult<Var<'g, S>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> TensorResult<Var<'g, S>> {
        let value = {
            let t = self.node_value();
            let (outer, dim, inner) = kernels::split_axis("narrow", t.shape(), axis)?;
            if len == 0 || start + len > dim {
                return Err(TensorError::IndexOutOfRange {
                    op: "narrow",
                    index: start + len,
                    size: dim,
                });
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&t.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor { shape, data }
        };
        Ok(self.graph.push(value, Op::Narrow { x: self.id, axis, start }))
    }

    /// Gather entries along `axis` (rows of an embedding table, tokens of a
    /// sequence). Indices may repeat; gradients scatter-add.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> TensorResult<Var<'g, S>> {
        let value = {
            let t = self.node_value();
            let (outer, dim, inner) = kernels::split_axis("index_select", t.shape(), axis)?;
            if indices.is_empty() {
                return Err(TensorError::Contract("index_select with no indices".into()));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
                return Err(TensorError::IndexOutOfRange {
                    op: "index_select",
                    index: bad,
                    size: dim,
                });
            }
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    data.extend_from_slice(&t.data()[(o * dim + i) * inner..(o * dim + i + 1) * inner]);
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = indices.len();
            Tensor { shape, data }
        };
        Ok(self.graph.push(
            value,
            Op::IndexSelect {
                x: self.id,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> TensorResult<Var<'g, S>> {
        let value = {
            let t = self.node_value();
            let (outer, dim, inner) = kernels::split_axis("softmax", t.shape(), axis)?;
            let x = t.data();
            let mut data = vec![S::zero(); x.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |d: usize| (o * dim + d) * inner + j;
                    let mx = (0..dim).map(|d| x[idx(d)]).fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for d in 0..dim {
                        let e = (x[idx(d)] - mx).exp();
                        data[idx(d)] = e;
                        z += e;
                    }
                    for d in 0..dim {
                        data[idx(d)] /= z;
                    }
                }
            }
            Tensor {
                shape: t.shape().to_vec(),
                data,
            }
        };
        Ok(self.graph.push(value, Op::Softmax { x: self.id, axis }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Var<'g, S> {
        let value = {
            let t = self.node_value();
            let dim = *t.shape().last().expect("log_softmax on scalar");
            let x = t.data();
            let mut data = vec![S::zero(); x.len()];
            for r in 0..x.len() / dim {
                let row = &x[r * dim..(r + 1) * dim];
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
                for d in 0..dim {
                    data[r * dim + d] = row[d] - lse;
                }
            }
            Tensor {
                shape: t.shape().to_vec(),
                data,
            }
        };
        self.graph.push(value, Op::LogSoftmax { x: self.id })
    }

    /// Layer normalisation over the last axis with population variance.
    pub fn layer_norm(&self, gamma: &Var<'g, S>, beta: &Var<'g, S>, eps: f64) -> TensorResult<Var<'g, S>> {
        let (value, xhat, rstd) = {
            let nodes = self.graph.nodes.borrow();
            let t = &nodes[self.id].value;
            let dim = *t.shape().last().ok_or(TensorError::Contract("layer_norm on scalar".into()))?;
            let (gm, bt) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            if gm.shape() != [dim] || bt.shape() != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: gm.shape().to_vec(),
                });
            }
            let x = t.data();
            let rows = x.len() / dim;
            let inv_n = S::one() / S::of_usize(dim);
            let mut xhat = vec![S::zero(); x.len()];
            let mut rstd = vec![S::zero(); rows];
            let mut data = vec![S::zero(); x.len()];
            for r in 0..rows {
                let row = &x[r * dim..(r + 1) * dim];
                let mu = row.iter().copied().sum::<S>() * inv_n;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_n;
                let rs = S::one() / (var + S::of(eps)).sqrt();
                rstd[r] = rs;
                for d in 0..dim {
                    let h = (row[d] - mu) * rs;
                    xhat[r * dim + d] = h;
                    data[r * dim + d] = h * gm.data()[d] + bt.data()[d];
                }
            }
            (
                Tensor {
                    shape: t.shape().to_vec(),
                    data,
                },
                xhat,
                rstd,
            )
        };
        Ok(self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Unit-norm rows along the last axis; the norm is floored at `eps`, so
    /// a zero row maps to zero.
    pub fn l2_normalize(&self, eps: f64) -> Var<'g, S> {
        let eps = S::of(eps);
        let (value, norms) = {
            let t = self.node_value();
            let dim = *t.shape().last().expect("l2_normalize on scalar");
            let x = t.data();
            let mut norms = Vec::with_capacity(x.len() / dim);
            let mut data = vec![S::zero(); x.len()];
            for r in 0..x.len() / dim {
                let row = &x[r * dim..(r + 1) * dim];
                let nrm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                let denom = nrm.max(eps);
                for d in 0..dim {
                    data[r * dim + d] = row[d] / denom;
                }
                norms.push(nrm);
            }
            (
                Tensor {
                    shape: t.shape().to_vec(),
                    data,
                },
                norms,
            )
        };
        self.graph.push(value, Op::L2Normalize { x: self.id, norms, eps })
    }

    /// Pairwise cosine similarity of rows: `[n, d] × [m, d] → [n, m]`.
    pub fn cosine_similarity(&self, other: &Var<'g, S>) -> TensorResult<Var<'g, S>> {
        let a = self.l2_normalize(1e-12);
        let b = other.l2_normalize(1e-12);
        a.matmul_t(&b)
    }

    /// Multi-head scaled dot-product attention with `self` as queries
    /// `[B, N, D]`, keys/values `[B, M, D]`. `key_valid` (length `B·M`)
    /// removes keys from the softmax; a batch row with no valid key attends
    /// to key 0 only.
    pub fn attention(
        &self,
        keys: &Var<'g, S>,
        values: &Var<'g, S>,
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> TensorResult<Var<'g, S>> {
        let (value, probs) = {
            let nodes = self.graph.nodes.borrow();
            let (qt, kt, vt) = (&nodes[self.id].value, &nodes[keys.id].value, &nodes[values.id].value);
            let (qs, ks) = (qt.shape(), kt.shape());
            let bad = |r: &[usize]| TensorError::ShapeMismatch {
                op: "attention",
                lhs: qs.to_vec(),
                rhs: r.to_vec(),
            };
            if qs.len() != 3 || ks.len() != 3 || ks[0] != qs[0] || ks[2] != qs[2] || qs[2] % heads != 0 {
                return Err(bad(ks));
            }
            if vt.shape() != ks {
                return Err(bad(vt.shape()));
            }
            let (batch, n, d, m) = (qs[0], qs[1], qs[2], ks[1]);
            if let Some(mask) = key_valid {
                if mask.len() != batch * m {
                    return Err(TensorError::Contract(format!(
                        "key mask length {} != {}",
                        mask.len(),
                        batch * m
                    )));
                }
            }
            let dh = d / heads;
            let scale = S::one() / S::of_usize(dh).sqrt();
            let mut probs = vec![S::zero(); batch * heads * n * m];
            let mut out = vec![S::zero(); batch * n * d];
            for b in 0..batch {
                let valid: Vec<bool> = match key_valid {
                    Some(mask) => {
                        let row = &mask[b * m..(b + 1) * m];
                        if row.iter().any(|&v| v) {
                            row.to_vec()
                        } else {
                            (0..m).map(|j| j == 0).collect()
                        }
                    }
                    None => vec![true; m],
                };
                for h in 0..heads {
                    let pb = (b * heads + h) * n * m;
                    gemm_block(
                        n,
                        dh,
                        m,
                        scale,
                        (qt.data(), b * n * d + h * dh, d as isize, 1),
                        (kt.data(), b * m * d + h * dh, 1, d as isize),
                        S::zero(),
                        (&mut probs, pb, m as isize, 1),
                    );
                    for r in 0..n {
                        let row = &mut probs[pb + r * m..pb + (r + 1) * m];
                        let mx = row
                            .iter()
                            .zip(&valid)
                            .filter(|(_, &ok)| ok)
                            .map(|(x, _)| *x)
                            .fold(S::neg_infinity(), S::max);
                        let mut z = S::zero();
                        for (x, &ok) in row.iter_mut().zip(&valid) {
                            *x = if ok { (*x - mx).exp() } else { S::zero() };
                            z += *x;
                        }
                        row.iter_mut().for_each(|x| *x /= z);
                    }
                    gemm_block(
                        n,
                        m,
                        dh,
                        S::one(),
                        (&probs, pb, m as isize, 1),
                        (vt.data(), b * m * d + h * dh, d as isize, 1),
                        S::zero(),
                        (&mut out, b * n * d + h * dh, d as isize, 1),
                    );
                }
            }
            (
                Tensor {
                    shape: vec![batch, n, d],
                    data: out,
                },
                probs,
            )
        };
        Ok(self.graph.push(
            value,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                probs,
            },
        ))
    }

    /// 2-D convolution over NCHW input with a square `[O, C, k, k]` kernel.
    pub fn conv2d(&self, weight: &Var<'g, S>, bias: &Var<'g, S>, stride: usize, padding: usize) -> TensorResult<Var<'g, S>> {
        let (value, geom, cols) = {
            let nodes = self.graph.nodes.borrow();
            let (xt, wt, bt) = (&nodes[self.id].value, &nodes[weight.id].value, &nodes[bias.id].value);
            let (xs, ws) = (xt.shape(), wt.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bt.shape() != [ws[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let geom = ConvGeom {
                channels: xs[1],
                height: xs[2],
                width: xs[3],
                kernel: ws[2],
                stride,
                padding,
            };
            if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[2] || stride == 0 {
                return Err(TensorError::Contract(format!("conv2d kernel {} too large for {:?}", ws[2], xs)));
            }
            let (ho, wo) = geom.out_hw();
            let (batch, oc, np, ckk) = (xs[0], ws[0], ho * wo, geom.col_rows());
            let img = xs[1] * xs[2] * xs[3];
            let mut cols = vec![S::zero(); batch * ckk * np];
            let mut out = vec![S::zero(); batch * oc * np];
            for b in 0..batch {
                let c = &mut cols[b * ckk * np..(b + 1) * ckk * np];
                kernels::im2col(&xt.data()[b * img..(b + 1) * img], &geom, c);
                let o = &mut out[b * oc * np..(b + 1) * oc * np];
                for (oi, chunk) in o.chunks_mut(np).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bt.data()[oi]);
                }
                kernels::gemm(Mat::new(wt.data(), oc, ckk), Mat::new(c, ckk, np), o, S::one());
            }
            (
                Tensor {
                    shape: vec![batch, oc, ho, wo],
                    data: out,
                },
                geom,
                cols,
            )
        };
        Ok(self.graph.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check<F>(f: F, shapes: &[&[usize]], tol: f64)
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> TensorResult<Var<'g, f64>>,
    {
        for seed in [1u64, 2, 3] {
            let inputs: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| rand_t(s, seed * 31 + i as u64))
                .collect();
            let r = finite_difference_check(&f, &inputs, &GradCheckOptions::default()).unwrap();
            assert!(r.max_rel_error < tol, "seed {seed}: {r:?}");
        }
    }

    // Random fixed weights so a sum-reduction does not hide wrong gradients.
    fn weighted<'g>(g: &'g Graph<f64>, y: Var<'g, f64>) -> TensorResult<Var<'g, f64>> {
        let w = g.constant(rand_t(&y.shape(), 99));
        Ok(y.mul(&w)?.sum())
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(&b).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
        let err = r.matmul(&r).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![1, 2],
                rhs: vec![1, 2]
            }
        );
    }

    #[test]
    fn matmul_gradients() {
        check(|_, x| Ok(x[0].matmul(&x[1])?.square().sum()), &[&[3, 4], &[4, 2]], 1e-6);
        check(|_, x| Ok(x[0].matmul_t(&x[1])?.square().sum()), &[&[2, 3, 4], &[2, 5, 4]], 1e-6);
        check(|_, x| Ok(x[0].matmul(&x[1])?.square().sum()), &[&[2, 3, 4], &[4, 5]], 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let y = g.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap().value();
        y.data().iter().for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
        let y = g.constant(t(&[2], &[1000.0, 1000.0])).softmax(0).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = g.constant(t(&[2], &[0.0, 1.0])).softmax(0).unwrap().value();
        let e = 1f64.exp();
        assert!((y.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((y.data()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((y.data()[0] - 0.2689).abs() < 1e-4);
        assert!(g.constant(t(&[2], &[0.0, 1.0])).softmax(1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::new();
        let one = g.constant(Tensor::ones(vec![3]));
        let zero = g.constant(Tensor::zeros(vec![3]));
        let y = g.constant(t(&[1, 3], &[5.0, 5.0, 5.0])).layer_norm(&one, &zero, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
        let one = g.constant(Tensor::ones(vec![2]));
        let zero = g.constant(Tensor::zeros(vec![2]));
        let y = g.constant(t(&[1, 2], &[1.0, 3.0])).layer_norm(&one, &zero, 1e-14).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-9);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradient() {
        check(|g, x| weighted(g, x[0].layer_norm(&x[1], &x[2], 1e-5)?), &[&[2, 8], &[8], &[8]], 1e-5);
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let x = g.variable(rand_t(&[2, 3], 5));
        let grads = g.backward(x.sum()).unwrap();
        assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 1.0));

        let g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let grads = g.backward(x.mul(&x).unwrap()).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);

        let g = Graph::new();
        let x = g.variable(rand_t(&[2], 1));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_inputs_get_no_gradient() {
        let g = Graph::new();
        let x = g.variable(Tensor::scalar(1.0));
        let y = g.variable(Tensor::scalar(2.0));
        let grads = g.backward(x.square()).unwrap();
        assert!(grads.wrt(y).is_none());
    }

    #[test]
    fn diamond_accumulates_paths() {
        // f = a·b + a·c with b = 2a, c = a² at a = 1.5: df/da = 4a + 3a².
        let g = Graph::new();
        let a = g.variable(Tensor::scalar(1.5));
        let b = a.scale(2.0);
        let c = a.square();
        let f = a.mul(&b).unwrap().add(&a.mul(&c).unwrap()).unwrap();
        let grads = g.backward(f).unwrap();
        let expect: f64 = 4.0 * 1.5 + 3.0 * 1.5 * 1.5;
        assert!((grads.wrt(a).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn elementwise_gradients() {
        check(|g, x| weighted(g, x[0].gelu()), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].sigmoid()), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].tanh()), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].exp()), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].square().offset(0.5).ln()), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].square().offset(0.5).sqrt()), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].scale(3.0).smooth_l1(1.0)), &[&[3, 4]], 1e-5);
        check(|g, x| weighted(g, x[0].square().offset(0.5).powf(1.5)), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].neg()), &[&[3, 4]], 1e-6);
    }

    #[test]
    fn broadcast_gradients() {
        check(|g, x| weighted(g, x[0].add(&x[1])?), &[&[2, 3, 4], &[4]], 1e-6);
        check(|g, x| weighted(g, x[0].sub(&x[1])?), &[&[2, 3, 4], &[3, 1]], 1e-6);
        check(|g, x| weighted(g, x[0].mul(&x[1])?), &[&[2, 3, 4], &[2, 1, 4]], 1e-6);
        check(
            |g, x| weighted(g, x[0].div(&x[1].square().offset(1.0))?),
            &[&[2, 3], &[2, 1]],
            1e-6,
        );
    }

    #[test]
    fn shape_op_gradients() {
        check(|g, x| weighted(g, x[0].sum_axis(1)?), &[&[2, 3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].mean_axis(2)?), &[&[2, 3, 4]], 1e-6);
        check(|_, x| Ok(x[0].mean()), &[&[2, 3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].reshape(vec![6, 4])?), &[&[2, 3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].permute(&[2, 0, 1])?), &[&[2, 3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].transpose()?), &[&[3, 4]], 1e-6);
        check(|g, x| weighted(g, g.concat(&[x[0], x[1]], 1)?), &[&[2, 3, 4], &[2, 2, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].narrow(1, 1, 2)?), &[&[2, 3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].index_select(0, &[2, 0, 2, 1])?), &[&[3, 4]], 1e-6);
    }

    #[test]
    fn normalisation_gradients() {
        check(|g, x| weighted(g, x[0].softmax(1)?), &[&[2, 3, 4]], 1e-6);
        check(|g, x| weighted(g, x[0].log_softmax()), &[&[3, 5]], 1e-6);
        check(|g, x| weighted(g, x[0].l2_normalize(1e-12)), &[&[3, 5]], 1e-6);
        check(|g, x| weighted(g, x[0].cosine_similarity(&x[1])?), &[&[3, 5], &[4, 5]], 1e-6);
    }

    #[test]
    fn attention_gradients() {
        check(
            |g, x| weighted(g, x[0].attention(&x[1], &x[2], 2, None)?),
            &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]],
            1e-6,
        );
        let mask = [true, true, false, true, false, false, false, false, false, false];
        check(
            move |g, x| weighted(g, x[0].attention(&x[1], &x[2], 2, Some(&mask))?),
            &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]],
            1e-6,
        );
    }

    #[test]
    fn attention_masked_keys_have_no_influence() {
        let q = rand_t(&[1, 2, 4], 1);
        let k = rand_t(&[1, 3, 4], 2);
        let v = rand_t(&[1, 3, 4], 3);
        let mask = [true, true, false];
        let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
            let g = Graph::new();
            let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            q.attention(&k, &v, 2, Some(&mask)).unwrap().value()
        };
        let base = run(&k, &v);
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for j in 8..12 {
            k2.data_mut()[j] += 7.0;
            v2.data_mut()[j] -= 3.0;
        }
        assert_eq!(base, run(&k2, &v2));
        // Everything masked: only key 0 is read.
        let none = [false; 3];
        let g = Graph::new();
        let out = g
            .constant(q.clone())
            .attention(&g.constant(k.clone()), &g.constant(v.clone()), 1, Some(&none))
            .unwrap()
            .value();
        assert_eq!(out.row(0), &v.data()[0..4]);
    }

    #[test]
    fn conv_gradients() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            check(
                move |g, x| weighted(g, x[0].conv2d(&x[1], &x[2], stride, pad)?),
                &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
                1e-6,
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_t(&[1, 2, 4, 4], 4);
        let w = rand_t(&[1, 2, 3, 3], 5);
        let g = Graph::new();
        let y = g
            .constant(x.clone())
            .conv2d(&g.constant(w.clone()), &g.constant(Tensor::zeros(vec![1])), 1, 1)
            .unwrap()
            .value();
        let at = |c: usize, i: isize, j: isize| {
            if i < 0 || j < 0 || i >= 4 || j >= 4 {
                0.0
            } else {
                x.data()[c * 16 + i as usize * 4 + j as usize]
            }
        };
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    for di in 0..3 {
                        for dj in 0..3 {
                            s += w.data()[c * 9 + di * 3 + dj] * at(c, i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        }
                    }
                }
                assert!((y.data()[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_params_stay_off_tape() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(vec![2]), crate::tensor::ParamGroup::Head, true);
        let b = store.add("b", Tensor::ones(vec![2]), crate::tensor::ParamGroup::Head, true);
        store.set_trainable(b, false);
        let g = Graph::new();
        let pa = g.param(&store, a);
        let pb = g.param(&store, b);
        assert_eq!(g.param(&store, a).id(), pa.id());
        let loss = pa.mul(&pb).unwrap().sum();
        assert!(g.param_on_tape(&store, a));
        assert!(!g.param_on_tape(&store, b));
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(&store, b).is_none());
        assert_eq!(grads.param(&store, a).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn l2_normalize_zero_row() {
        let g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(vec![1, 3]));
        let y = x.l2_normalize(1e-12);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn works_in_single_precision() {
        let g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = x.matmul(&x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let g = Graph::new();
            let n = v.len();
            let y = g.constant(Tensor::new(vec![n], v).unwrap()).softmax(0).unwrap().value();
            prop_assert!(y.data().iter().all(|&p| p >= 0.0));
            prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn l2_normalize_gives_unit_rows(v in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
            let g = Graph::new();
            let n = v.len();
            let y = g.constant(Tensor::new(vec![1, n], v).unwrap()).l2_normalize(1e-12).value();
            let norm = y.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}
