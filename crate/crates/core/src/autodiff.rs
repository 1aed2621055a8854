//! Reverse-mode automatic differentiation over a per-forward-pass graph.
//!
//! A [`Graph`] records every operation as a node in creation order, which is a
//! topological order. [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients into the leaves that require them. Leaf gradients
//! persist across `backward` calls until [`Graph::zero_grad`].
//!
//! Model parameters live in a [`ParamStore`]; a [`Scope`] binds a store to a
//! graph so the same parameter always maps to one leaf per graph.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, matmul_nn, matmul_nt, matmul_tn, BroadcastMap, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Names are stable path strings used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a new parameter. Panics on a duplicate name, which is a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Shift(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    CosineMatrix {
        a: usize,
        b: usize,
        eps: S,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        a: usize,
        indices: Vec<usize>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded computation of one forward pass.
///
/// Not `Sync`: build and differentiate a graph on a single thread. Independent
/// graphs (e.g. one per video) may live on different threads.
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    leaf_grads: RefCell<HashMap<usize, Tensor<S>>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// A graph paired with the parameter store its parameter leaves read from.
#[derive(Clone, Copy)]
pub struct Scope<'g, S> {
    pub graph: &'g Graph<S>,
    pub params: &'g ParamStore<S>,
}

impl<'g, S: Scalar> Scope<'g, S> {
    pub fn new(graph: &'g Graph<S>, params: &'g ParamStore<S>) -> Self {
        Self { graph, params }
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'g, S> {
        self.graph.param(self.params, id)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'g, S> {
        self.graph.constant(value)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044_715);
    let half = S::lit(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044_715);
    let half = S::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x)
}

/// Logistic function kept strictly inside `(0, 1)`: where it would round to 0
/// or 1 it returns the nearest representable interior value.
fn sigmoid<S: Scalar>(x: S) -> S {
    let y = if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    };
    let below_one = S::one() - S::epsilon() / S::lit(2.0);
    y.max(S::min_positive_value()).min(below_one)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(HashMap::new()),
            param_leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that requires a gradient.
    pub fn variable(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    pub fn param<'g>(&'g self, store: &ParamStore<S>, id: ParamId) -> Var<'g, S> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.param_leaves.borrow_mut().insert(id, v.id);
        v
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Accumulated gradient of a leaf, if one has been produced.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Gradients of every parameter leaf that received one, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<S>)> {
        let leaves = self.param_leaves.borrow();
        let grads = self.leaf_grads.borrow();
        let mut out: Vec<(ParamId, Tensor<S>)> = leaves
            .iter()
            .filter_map(|(&pid, node)| grads.get(node).map(|g| (pid, g.clone())))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    /// Back-propagates from a one-element `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![S::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = &node.value;
            let mut acc = |id: usize, contrib: Vec<S>| {
                if !nodes[id].requires_grad {
                    return;
                }
                match &mut grads[id] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(val.shape().to_vec(), g).expect("grad shape");
                    match leaf_grads.get_mut(&i) {
                        Some(existing) => existing.add_assign(&t),
                        None => {
                            leaf_grads.insert(i, t);
                        }
                    }
                }
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                    for (id, s) in [(a, S::one()), (b, sign)] {
                        if !nodes[id].requires_grad {
                            continue;
                        }
                        let shape = nodes[id].value.shape();
                        let map = BroadcastMap::new(shape, val.shape());
                        let mut ga = vec![S::zero(); nodes[id].value.len()];
                        for (k, &gv) in g.iter().enumerate() {
                            ga[map.index(k)] += s * gv;
                        }
                        acc(id, ga);
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let ma = BroadcastMap::new(av.shape(), val.shape());
                    let mb = BroadcastMap::new(bv.shape(), val.shape());
                    if nodes[a].requires_grad {
                        let mut ga = vec![S::zero(); av.len()];
                        for (k, &gv) in g.iter().enumerate() {
                            ga[ma.index(k)] += gv * bv.data()[mb.index(k)];
                        }
                        acc(a, ga);
                    }
                    if nodes[b].requires_grad {
                        let mut gb = vec![S::zero(); bv.len()];
                        for (k, &gv) in g.iter().enumerate() {
                            gb[mb.index(k)] += gv * av.data()[ma.index(k)];
                        }
                        acc(b, gb);
                    }
                }
                &Op::Scale(a, c) => acc(a, g.iter().map(|&x| x * c).collect()),
                &Op::Shift(a) | &Op::Reshape(a) => acc(a, g),
                &Op::Matmul(a, b) => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[a].requires_grad {
                        acc(a, matmul_nt(&g, bv.data(), m, n, k));
                    }
                    if nodes[b].requires_grad {
                        acc(b, matmul_tn(av.data(), &g, m, k, n));
                    }
                }
                &Op::Transpose(a) => {
                    let (r, c) = (val.shape()[0], val.shape()[1]);
                    let gt = Tensor::matrix(r, c, g).expect("grad shape").transpose().expect("2d");
                    acc(a, gt.into_data());
                }
                &Op::Exp(a) => acc(a, g.iter().zip(val.data()).map(|(&gv, &y)| gv * y).collect()),
                &Op::Log(a) => acc(
                    a,
                    g.iter().zip(nodes[a].value.data()).map(|(&gv, &x)| gv / x).collect(),
                ),
                &Op::Relu(a) => acc(
                    a,
                    g.iter()
                        .zip(nodes[a].value.data())
                        .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                        .collect(),
                ),
                &Op::Gelu(a) => acc(
                    a,
                    g.iter()
                        .zip(nodes[a].value.data())
                        .map(|(&gv, &x)| gv * gelu_grad(x))
                        .collect(),
                ),
                &Op::Sigmoid(a) => acc(
                    a,
                    g.iter()
                        .zip(val.data())
                        .map(|(&gv, &y)| gv * y * (S::one() - y))
                        .collect(),
                ),
                &Op::Sum(a) => acc(a, vec![g[0]; nodes[a].value.len()]),
                &Op::Mean(a) => {
                    let n = nodes[a].value.len();
                    acc(a, vec![g[0] / S::from_usize_lossy(n); n]);
                }
                &Op::MeanRows(a) => {
                    let (r, c) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                    let inv = S::one() / S::from_usize_lossy(r);
                    let mut ga = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        ga.extend(g.iter().map(|&x| x * inv));
                    }
                    acc(a, ga);
                }
                &Op::SoftmaxRows(a) => {
                    let c = val.cols();
                    let mut ga = vec![S::zero(); val.len()];
                    for ((grow, yrow), out) in g
                        .chunks(c)
                        .zip(val.data().chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let dot: S = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                        for ((o, &gv), &y) in out.iter_mut().zip(grow).zip(yrow) {
                            *o = y * (gv - dot);
                        }
                    }
                    acc(a, ga);
                }
                &Op::LogSoftmaxRows(a) => {
                    let c = val.cols();
                    let mut ga = vec![S::zero(); val.len()];
                    for ((grow, yrow), out) in g
                        .chunks(c)
                        .zip(val.data().chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let total: S = grow.iter().copied().sum();
                        for ((o, &gv), &y) in out.iter_mut().zip(grow).zip(yrow) {
                            *o = gv - y.exp() * total;
                        }
                    }
                    acc(a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = val.cols();
                    let gam = nodes[*gamma].value.data();
                    let dn = S::from_usize_lossy(d);
                    if nodes[*gamma].requires_grad || nodes[*beta].requires_grad {
                        let mut gg = vec![S::zero(); d];
                        let mut gb = vec![S::zero(); d];
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                                gb[j] += grow[j];
                            }
                        }
                        acc(*gamma, gg);
                        acc(*beta, gb);
                    }
                    if nodes[*x].requires_grad {
                        let mut gx = vec![S::zero(); val.len()];
                        for (r, ((grow, hrow), out)) in g
                            .chunks(d)
                            .zip(xhat.chunks(d))
                            .zip(gx.chunks_mut(d))
                            .enumerate()
                        {
                            let dxhat: Vec<S> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                            let sum_d: S = dxhat.iter().copied().sum();
                            let sum_dh: S = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                            let scale = inv_std[r] / dn;
                            for j in 0..d {
                                out[j] = scale * (dn * dxhat[j] - sum_d - hrow[j] * sum_dh);
                            }
                        }
                        acc(*x, gx);
                    }
                }
                &Op::CosineMatrix { a, b, eps } => {
                    let (av, bv) = (&nodes[a].value, &nodes[b].value);
                    let d = av.cols();
                    let (n, m) = (av.rows(), bv.rows());
                    let norms = |t: &Tensor<S>| -> Vec<S> {
                        t.data()
                            .chunks(d)
                            .map(|r| r.iter().map(|&x| x * x).sum::<S>().sqrt())
                            .collect()
                    };
                    let (na, nb) = (norms(av), norms(bv));
                    let s = val.data();
                    if nodes[a].requires_grad {
                        let mut ga = vec![S::zero(); av.len()];
                        for i in 0..n {
                            let dena = na[i].max(eps);
                            let mut gs = S::zero();
                            for j in 0..m {
                                let gij = g[i * m + j];
                                let coef = gij / (dena * nb[j].max(eps));
                                for k in 0..d {
                                    ga[i * d + k] += coef * bv.data()[j * d + k];
                                }
                                gs += gij * s[i * m + j];
                            }
                            if na[i] > eps {
                                let c = gs / (na[i] * na[i]);
                                for k in 0..d {
                                    ga[i * d + k] -= c * av.data()[i * d + k];
                                }
                            }
                        }
                        acc(a, ga);
                    }
                    if nodes[b].requires_grad {
                        let mut gb = vec![S::zero(); bv.len()];
                        for j in 0..m {
                            let denb = nb[j].max(eps);
                            let mut gs = S::zero();
                            for i in 0..n {
                                let gij = g[i * m + j];
                                let coef = gij / (na[i].max(eps) * denb);
                                for k in 0..d {
                                    gb[j * d + k] += coef * av.data()[i * d + k];
                                }
                                gs += gij * s[i * m + j];
                            }
                            if nb[j] > eps {
                                let c = gs / (nb[j] * nb[j]);
                                for k in 0..d {
                                    gb[j * d + k] -= c * bv.data()[j * d + k];
                                }
                            }
                        }
                        acc(b, gb);
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = outer_inner(val.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        if nodes[p].requires_grad {
                            let mut gp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                gp.extend_from_slice(&g[base..base + len * inner]);
                            }
                            acc(p, gp);
                        }
                        offset += len;
                    }
                }
                &Op::Narrow { a, axis, start } => {
                    let (outer, total, inner) = outer_inner(nodes[a].value.shape(), axis);
                    let len = val.shape()[axis];
                    let mut ga = vec![S::zero(); nodes[a].value.len()];
                    for o in 0..outer {
                        let dst = (o * total + start) * inner;
                        let src = o * len * inner;
                        ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(a, ga);
                }
                Op::Gather { a, indices } => {
                    let mut ga = vec![S::zero(); nodes[*a].value.len()];
                    for (&ix, &gv) in indices.iter().zip(&g) {
                        ga[ix] += gv;
                    }
                    acc(*a, ga);
                }
            }
        }
        Ok(())
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<S> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated into this leaf by `backward`.
    pub fn grad(&self) -> Option<Tensor<S>> {
        self.graph.grad(*self)
    }

    fn same_graph(&self, other: &Var<'g, S>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn unary(&self, op: Op<S>, f: impl FnOnce(&Tensor<S>) -> Tensor<S>) -> Var<'g, S> {
        let value = f(&self.graph.nodes.borrow()[self.id].value);
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn elementwise(&self, other: &Var<'g, S>, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var<'g, S>> {
        self.same_graph(other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let ma = BroadcastMap::new(a.shape(), &shape);
            let mb = BroadcastMap::new(b.shape(), &shape);
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|k| f(a.data()[ma.index(k)], b.data()[mb.index(k)]))
                .collect();
            Tensor::new(shape, data)?
        };
        let rg = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(value, op, rg))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.elementwise(&other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    /// Broadcasting subtraction.
    pub fn sub(&self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.elementwise(&other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.elementwise(&other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: S) -> Var<'g, S> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| x * c))
    }

    pub fn neg(&self) -> Var<'g, S> {
        self.scale(-S::one())
    }

    /// Addition of a constant.
    pub fn shift(&self, c: S) -> Var<'g, S> {
        self.unary(Op::Shift(self.id), |t| t.map(|x| x + c))
    }

    pub fn matmul(&self, other: Var<'g, S>) -> Result<Var<'g, S>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim(format!(
                    "matmul of {:?} by {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::matrix(m, n, matmul_nn(a.data(), b.data(), m, k, n))?
        };
        let rg = self.graph.requires(&[self.id, other.id]);
        Ok(self.graph.push(value, Op::Matmul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'g, S>> {
        let value = self.graph.nodes.borrow()[self.id].value.transpose()?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, S>> {
        let value = self.graph.nodes.borrow()[self.id].value.reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::Reshape(self.id), rg))
    }

    pub fn exp(&self) -> Var<'g, S> {
        self.unary(Op::Exp(self.id), |t| t.map(S::exp))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Var<'g, S>> {
        {
            let nodes = self.graph.nodes.borrow();
            if let Some(bad) = nodes[self.id].value.data().iter().find(|&&x| !(x > S::zero())) {
                return Err(Error::Domain(format!("log of nonpositive value {bad}")));
            }
        }
        Ok(self.unary(Op::Log(self.id), |t| t.map(S::ln)))
    }

    pub fn relu(&self) -> Var<'g, S> {
        self.unary(Op::Relu(self.id), |t| t.map(|x| x.max(S::zero())))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g, S> {
        self.unary(Op::Gelu(self.id), |t| t.map(gelu_fwd))
    }

    pub fn sigmoid(&self) -> Var<'g, S> {
        self.unary(Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&self) -> Var<'g, S> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&self) -> Var<'g, S> {
        self.unary(Op::Mean(self.id), |t| {
            Tensor::scalar(t.sum() / S::from_usize_lossy(t.len()))
        })
    }

    /// Column means of a matrix, shape `[1, cols]`.
    pub fn mean_rows(&self) -> Result<Var<'g, S>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.ndim() != 2 {
                return Err(Error::dim(format!("mean_rows needs a matrix, got {:?}", t.shape())));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![S::zero(); c];
            for row in t.data().chunks(c) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = S::one() / S::from_usize_lossy(r);
            Tensor::matrix(1, c, out.into_iter().map(|v| v * inv).collect())?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::MeanRows(self.id), rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&self) -> Var<'g, S> {
        self.unary(Op::SoftmaxRows(self.id), |t| {
            let c = t.cols();
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            out
        })
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax_rows(&self) -> Var<'g, S> {
        self.unary(Op::LogSoftmaxRows(self.id), |t| {
            let c = t.cols();
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, S>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let t = &nodes[self.id].value;
            if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
                return Err(Error::dim(format!(
                    "narrow [{start}, {}) along axis {axis} of {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let (outer, total, inner) = outer_inner(t.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::Narrow { a: self.id, axis, start }, rg))
    }

    /// Entries at flat `indices`, as a vector.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'g, S>> {
        let value = {
            let nodes = self.graph.nodes.borrow();
            let t = &nodes[self.id].value;
            if indices.is_empty() {
                return Err(Error::dim("gather with no indices"));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
                return Err(Error::dim(format!("gather index {bad} out of {} entries", t.len())));
            }
            Tensor::vector(indices.iter().map(|&i| t.data()[i]).collect())?
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(
            value,
            Op::Gather {
                a: self.id,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }
}

/// Concatenation along `axis`; all other dimensions must agree.
pub fn concat<'g, S: Scalar>(parts: &[Var<'g, S>], axis: usize) -> Result<Var<'g, S>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let graph = first.graph;
    for p in parts {
        first.same_graph(p);
    }
    let value = {
        let nodes = graph.nodes.borrow();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
        let base = shapes[0];
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        for s in &shapes {
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!("concat of {base:?} with {s:?} along axis {axis}")));
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = outer_inner(base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Tensor::new(shape, data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = graph.requires(&ids);
    Ok(graph.push(value, Op::Concat { parts: ids, axis }, rg))
}

/// Splits along `axis` into consecutive blocks of the given sizes; the exact inverse of [`concat`].
pub fn split<'g, S: Scalar>(x: Var<'g, S>, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g, S>>> {
    let shape = x.shape();
    if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
        return Err(Error::dim(format!(
            "split sizes {sizes:?} do not cover axis {axis} of {shape:?}"
        )));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = x.narrow(axis, start, len);
            start += len;
            part
        })
        .collect()
}

/// Layer normalization over the last axis followed by the affine `gamma`, `beta`.
pub fn layernorm<'g, S: Scalar>(x: Var<'g, S>, gamma: Var<'g, S>, beta: Var<'g, S>, eps: S) -> Result<Var<'g, S>> {
    x.same_graph(&gamma);
    x.same_graph(&beta);
    let graph = x.graph;
    let (value, xhat, inv_std) = {
        let nodes = graph.nodes.borrow();
        let (t, g, b) = (&nodes[x.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
        let d = t.cols();
        if g.len() != d || b.len() != d {
            return Err(Error::dim(format!(
                "layernorm over width {d} with gamma {:?} and beta {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let dn = S::from_usize_lossy(d);
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.len() / d);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g.data()[j] + b.data()[j]);
            }
        }
        (Tensor::new(t.shape().to_vec(), out)?, xhat, inv_std)
    };
    let rg = graph.requires(&[x.id, gamma.id, beta.id]);
    Ok(graph.push(
        value,
        Op::LayerNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
        },
        rg,
    ))
}

/// Pairwise cosine similarities between the rows of `a` (`N×D`) and `b` (`M×D`),
/// each norm clamped below by `eps`. Returns `N×M`.
pub fn cosine_matrix<'g, S: Scalar>(a: Var<'g, S>, b: Var<'g, S>, eps: S) -> Result<Var<'g, S>> {
    a.same_graph(&b);
    let graph = a.graph;
    let value = {
        let nodes = graph.nodes.borrow();
        let (av, bv) = (&nodes[a.id].value, &nodes[b.id].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.cols() {
            return Err(Error::dim(format!(
                "cosine similarity between rows of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let d = av.cols();
        let norm = |r: &[S]| r.iter().map(|&x| x * x).sum::<S>().sqrt().max(eps);
        let na: Vec<S> = av.data().chunks(d).map(norm).collect();
        let nb: Vec<S> = bv.data().chunks(d).map(norm).collect();
        let dots = matmul_nt(av.data(), bv.data(), av.rows(), d, bv.rows());
        let m = bv.rows();
        let data = dots
            .iter()
            .enumerate()
            .map(|(k, &dot)| dot / (na[k / m] * nb[k % m]))
            .collect();
        Tensor::matrix(av.rows(), m, data)?
    };
    let rg = graph.requires(&[a.id, b.id]);
    Ok(graph.push(value, Op::CosineMatrix { a: a.id, b: b.id, eps }, rg))
}

/// Cosine similarity of two vectors, shape `[1]`.
pub fn cosine_similarity<'g, S: Scalar>(u: Var<'g, S>, v: Var<'g, S>, eps: S) -> Result<Var<'g, S>> {
    let (du, dv) = (u.shape(), v.shape());
    let d = *du.last().expect("non-empty shape");
    if du.iter().product::<usize>() != d || dv.iter().product::<usize>() != d {
        return Err(Error::dim(format!("cosine_similarity of {du:?} and {dv:?}")));
    }
    let cm = cosine_matrix(u.reshape(vec![1, d])?, v.reshape(vec![1, d])?, eps)?;
    cm.reshape(vec![1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[0.0], &[1.0]]));
        assert_eq!(a.matmul(b).unwrap().value(), t(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let a = t(&[&[0.3, -1.5], &[2.0, 7.0]]);
        let i = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(i.matmul(g.constant(a.clone())).unwrap().value(), a);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0]]));
        let y = x.softmax_rows().value();
        for v in &y.data()[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y.data()[3] - 1.0).abs() < 1e-12 && y.data()[4] < 1e-12);
        assert!(y.all_finite());
    }

    #[test]
    fn layernorm_cases() {
        let g = Graph::new();
        let gamma = g.constant(Tensor::ones(vec![2]));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(t(&[&[1.0, 3.0], &[5.0, 5.0]]));
        let y = layernorm(x, gamma, beta, 1e-5).unwrap().value();
        assert!((y.data()[0] + 1.0).abs() < 1e-3 && (y.data()[1] - 1.0).abs() < 1e-3);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn relu_and_log_domain() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn add_broadcast_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![3, 4]));
        let b = g.constant(Tensor::zeros(vec![3]));
        assert!(matches!(a.add(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_cases() {
        let g = Graph::new();
        let u = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        let v = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let w = g.constant(Tensor::<f64>::vector(vec![0.3, -2.0]).unwrap());
        assert_eq!(cosine_similarity(u, v, 1e-8).unwrap().value().item(), 0.0);
        assert!((cosine_similarity(w, w, 1e-8).unwrap().value().item() - 1.0).abs() < 1e-15);
        let z = g.constant(Tensor::zeros(vec![2]));
        assert_eq!(cosine_similarity(z, u, 1e-8).unwrap().value().item(), 0.0);
    }

    #[test]
    fn split_inverts_concat() {
        let g = Graph::new();
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0]]);
        let c = concat(&[g.constant(a.clone()), g.constant(b.clone())], 0).unwrap();
        let parts = split(c, 0, &[2, 1]).unwrap();
        assert_eq!(parts[0].value(), a);
        assert_eq!(parts[1].value(), b);
        let c1 = concat(&[g.constant(a.clone()), g.constant(a.clone())], 1).unwrap();
        assert_eq!(c1.shape(), vec![2, 4]);
        let parts = split(c1, 1, &[2, 2]).unwrap();
        assert_eq!(parts[1].value(), a);
    }

    #[test]
    fn backward_sum_and_square() {
        let g = Graph::new();
        let x0 = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
        let x = g.variable(x0.clone());
        g.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), Tensor::ones(vec![3]));
        g.zero_grad();
        g.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap(), x0.map(|v| 2.0 * v));
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let loss = x.sum();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let g = Graph::new();
        let scope = Scope::new(&g, &store);
        let a = scope.param(id);
        let b = scope.param(id);
        assert_eq!(a.id(), b.id());
        g.backward(a.add(b).unwrap().sum()).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, 2.0]);
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        let g = Graph::<f32>::new();
        let y = g.constant(Tensor::vector(vec![-200.0, 40.0, 0.0]).unwrap()).sigmoid().value();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0), "{y:?}");
        assert_eq!(y.data()[2], 0.5);
    }
}
