//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in topological order.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients into every reachable node that requires them.

mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv4dGeom};
use crate::params::ParamStore;
use crate::tensor::{lit, Scalar, Tensor};

pub use ops::Activation;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Records ops and saved activations for [`Graph::backward`].
    Train,
    /// Forward only; nothing is kept for differentiation.
    Infer,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Act { a: Var, kind: Activation },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, gamma: Var, beta: Var },
    Conv4d { x: Var, k: Var, geom: Conv4dGeom },
    Resample { a: Var, axis: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum { a: Var },
    MeanAxis { a: Var, axis: usize },
    NormalizeL2 { a: Var },
    NormLast { a: Var },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Act { kind: Activation::Relu, .. } => "relu",
            Op::Act { kind: Activation::Gelu, .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv4d { .. } => "conv4d",
            Op::Resample { .. } => "resample",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::MeanAxis { .. } => "mean_axis",
            Op::NormalizeL2 { .. } => "normalize_l2",
            Op::NormLast { .. } => "norm",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Op-specific activations kept for backward (layer-norm statistics).
    saved: Vec<T>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    param_reads: Vec<(String, Var)>,
    bytes: usize,
    peak_bytes: usize,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        crate::kernels::flush_subnormals();
        Graph {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            param_order: Vec::new(),
            param_reads: Vec::new(),
            bytes: 0,
            peak_bytes: 0,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn infer() -> Self {
        Self::new(Mode::Infer)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, Vec::new())
    }

    /// A leaf that receives a gradient in train mode.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = self.mode == Mode::Train;
        self.push(t, Op::Leaf, rg, Vec::new())
    }

    /// Reads a named parameter. Repeated reads of the same name return the
    /// same node, so every use shares one gradient slot.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let v = match self.params.get(name) {
            Some(&v) => v,
            None => {
                let t = store.value(name)?.clone();
                let v = self.input(t);
                self.params.insert(name.to_string(), v);
                self.param_order.push((name.to_string(), v));
                v
            }
        };
        self.param_reads.push((name.to_string(), v));
        Ok(v)
    }

    /// Every `(name, node)` parameter read so far, in call order.
    pub fn param_reads(&self) -> &[(String, Var)] {
        &self.param_reads
    }

    /// Distinct parameters bound into this graph, in first-read order.
    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Bytes currently held by node values and saved activations.
    pub fn resident_bytes(&self) -> usize {
        self.bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    /// The first node (in execution order) holding a non-finite value, with
    /// the name of the op that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool, saved: Vec<T>) -> Var {
        let (op, saved) = match self.mode {
            Mode::Train => (op, saved),
            Mode::Infer => (Op::Leaf, Vec::new()),
        };
        self.bytes += (value.len() + saved.len()) * std::mem::size_of::<T>();
        self.peak_bytes = self.peak_bytes.max(self.bytes);
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.mode == Mode::Train, saved });
        Var(self.nodes.len() - 1)
    }

    /// Pushes an op result; it requires grad when any input does.
    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Op, inputs: &[Var], saved: Vec<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg, saved)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.mode != Mode::Train {
            return Err(Error::State("backward called on an inference graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k;
                if self.wants(*a) {
                    kernels::gemm(m, n, k, g, false, bv.data(), true, slot(grads, *a, av.len()), true);
                }
                if self.wants(*b) {
                    kernels::gemm(k, m, n, av.data(), true, g, false, slot(grads, *b, bv.len()), true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let [bs, m, k] = [av.shape()[0], av.shape()[1], av.shape()[2]];
                let n = out.shape()[2];
                if self.wants(*a) {
                    let da = slot(grads, *a, av.len());
                    for t in 0..bs {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bv.data()[t * k * n..(t + 1) * k * n];
                        // dA = G · op(B)^T
                        kernels::gemm(m, n, k, gb, false, bb, !*trans_b, &mut da[t * m * k..(t + 1) * m * k], true);
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, bv.len());
                    for t in 0..bs {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let ab = &av.data()[t * m * k..(t + 1) * m * k];
                        let dst = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            kernels::gemm(n, m, k, gb, true, ab, false, dst, true);
                        } else {
                            kernels::gemm(k, m, n, ab, true, gb, false, dst, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let nb = self.value(*b).len();
                    let db = slot(grads, *b, nb);
                    for chunk in g.chunks_exact(nb) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, g.len());
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bv[j];
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * av[j];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.wants(*a) {
                    let c: T = lit(*c);
                    let da = slot(grads, *a, g.len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = *d + gv * c;
                    }
                }
            }
            Op::Act { a, kind } => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let da = slot(grads, *a, g.len());
                    match kind {
                        Activation::Relu => {
                            for j in 0..g.len() {
                                if x[j] > T::zero() {
                                    da[j] = da[j] + g[j];
                                }
                            }
                        }
                        Activation::Gelu => {
                            for j in 0..g.len() {
                                da[j] = da[j] + g[j] * kernels::gelu_grad(x[j]);
                            }
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if self.wants(*a) {
                    let da = slot(grads, *a, g.len());
                    kernels::softmax_backward(out.data(), g, out.shape(), *axis, da);
                }
            }
            Op::LayerNorm { a, gamma, beta } => {
                let x = self.value(*a);
                let f = *x.shape().last().expect("layer norm input has rank >= 1");
                let gm = self.value(*gamma).data();
                let mut dx = self.wants(*a).then(|| take_slot(grads, *a, x.len()));
                let mut dg = self.wants(*gamma).then(|| take_slot(grads, *gamma, f));
                let mut db = self.wants(*beta).then(|| take_slot(grads, *beta, f));
                kernels::layer_norm_backward(
                    x.data(),
                    f,
                    gm,
                    &node.saved,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                put_slot(grads, *a, dx);
                put_slot(grads, *gamma, dg);
                put_slot(grads, *beta, db);
            }
            Op::Conv4d { x, k, geom } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let mut dx = self.wants(*x).then(|| take_slot(grads, *x, xv.len()));
                let mut dk = self.wants(*k).then(|| take_slot(grads, *k, kv.len()));
                kernels::conv4d_backward(xv.data(), kv.data(), g, geom, dx.as_deref_mut(), dk.as_deref_mut());
                put_slot(grads, *x, dx);
                put_slot(grads, *k, dk);
            }
            Op::Resample { a, axis } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let n_out = out.shape()[*axis];
                    let da = slot(grads, *a, av.len());
                    kernels::resample_backward(g, av.shape(), *axis, n_out, da);
                }
            }
            Op::Permute { a, perm } => {
                if self.wants(*a) {
                    let back = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
                    add_into(slot(grads, *a, g.len()), &back);
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, n_out, inner) = kernels::split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let n = self.value(*v).shape()[*axis];
                    if self.wants(*v) {
                        let dv = slot(grads, *v, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * n_out + offset) * inner..(o * n_out + offset + n) * inner];
                            add_into(&mut dv[o * n * inner..(o + 1) * n * inner], src);
                        }
                    }
                    offset += n;
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let da = slot(grads, *a, n);
                    for d in da.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::MeanAxis { a, axis } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let (outer, n, inner) = kernels::split_axis(av.shape(), *axis);
                    let inv: T = lit(1.0 / n as f64);
                    let da = slot(grads, *a, av.len());
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                let d = &mut da[(o * n + j) * inner + i];
                                *d = *d + g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::NormalizeL2 { a } => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let f = *out.shape().last().expect("rank >= 1");
                    let y = out.data();
                    let da = slot(grads, *a, x.len());
                    for r in 0..x.len() / f {
                        let s = r * f..(r + 1) * f;
                        let norm = x[s.clone()].iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
                        if norm == T::zero() {
                            continue;
                        }
                        let dot = (0..f).fold(T::zero(), |acc, j| acc + y[r * f + j] * g[r * f + j]);
                        for j in s {
                            da[j] = da[j] + (g[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::NormLast { a } => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let f = x.len() / out.len();
                    let da = slot(grads, *a, x.len());
                    for (r, &n) in out.data().iter().enumerate() {
                        // Zero-length vectors take the zero subgradient.
                        if n == T::zero() {
                            continue;
                        }
                        for j in r * f..(r + 1) * f {
                            da[j] = da[j] + g[r] * x[j] / n;
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn take_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

fn put_slot<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
