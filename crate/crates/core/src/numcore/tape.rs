//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value and the information its
//! backward pass needs. A tape borrows a [`ParamStore`] read-only, so
//! independent tapes over the same parameters can run on separate threads.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{add_assign, dot, matmul_into, matmul_nt_into, matmul_tn_into, sum_sq};
use super::{NumError, ParamGroup, ParamId, ParamStore, Real, Tensor};

/// Lower bound on vector norms accepted by [`Tape::cosine`].
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis 0 runs down the rows, axis 1 along the columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, Axis),
    Dropout(Var, Vec<T>),
    Concat(Vec<Var>, Axis),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    Mean(Var, Axis),
    Sum(Var),
    L2Norm(Var),
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Attention(Box<AttentionNode<T>>),
}

struct AttentionNode<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Vec<bool>>,
    weights: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    frozen: Vec<ParamGroup>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to an input leaf, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

fn shape_err(msg: String) -> NumError {
    NumError::Shape(msg)
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::with_capacity(256), param_vars: vec![None; store.len()], frozen: Vec::new() }
    }

    /// A tape on which parameters of the given groups are treated as constants.
    pub fn with_frozen(store: &'p ParamStore<T>, frozen: &[ParamGroup]) -> Self {
        let mut tape = Self::new(store);
        tape.frozen = frozen.to_vec();
        tape
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let needs = p.requires_grad && !self.frozen.contains(&p.group);
        let v = self.push(p.value.clone(), Op::Param(id), needs);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var, NumError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| NumError::Lookup(format!("no parameter named `{name}`")))?;
        Ok(self.param(id))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(n, m);
        matmul_into(av.data(), bv.data(), n, k, m, out.data_mut(), false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(format!("matmul_nt {:?} x {:?}^T", av.shape(), bv.shape())));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(n, m);
        matmul_nt_into(av.data(), bv.data(), n, k, m, out.data_mut(), false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.rows(), av.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err(format!("add_row {:?} + {:?}", av.shape(), rv.shape())));
        }
        let m = av.cols();
        let mut out = av.clone();
        for r in out.data_mut().chunks_mut(m.max(1)) {
            for (o, &x) in r.iter_mut().zip(rv.data()) {
                *o = *o + x;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let cc = T::of(c);
        let data = av.data().iter().map(|&x| x * cc).collect();
        let out = Tensor::new(av.rows(), av.cols(), data).expect("shape");
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.rows(), av.cols(), data).expect("shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.tanh());
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| T::of(1.0 / (1.0 + (-x.f64()).exp())));
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(n, m);
        match axis {
            Axis::Cols => {
                for i in 0..n {
                    let row: Vec<f64> = av.row(i).iter().map(|x| x.f64()).collect();
                    let probs = softmax_f64(&row);
                    for (j, p) in probs.into_iter().enumerate() {
                        out.set(i, j, T::of(p));
                    }
                }
            }
            Axis::Rows => {
                for j in 0..m {
                    let col: Vec<f64> = (0..n).map(|i| av.get(i, j).f64()).collect();
                    let probs = softmax_f64(&col);
                    for (i, p) in probs.into_iter().enumerate() {
                        out.set(i, j, T::of(p));
                    }
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a, axis), ng)
    }

    /// Inverted dropout. Identity (no new node) when `train` is false or the
    /// rate is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let inv = T::of(1.0 / keep);
        let len = self.value(a).len();
        let mask: Vec<T> = (0..len)
            .map(|_| if rng.random::<f64>() < keep { inv } else { T::zero() })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &k)| x * k).collect();
        let out = Tensor::new(av.rows(), av.cols(), data).expect("shape");
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Dropout(a, mask), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(shape_err("concat of nothing".into()));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let out = match axis {
            Axis::Rows => {
                let m = self.value(parts[0]).cols();
                let mut data = Vec::new();
                let mut n = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if pv.cols() != m {
                        return Err(shape_err(format!("concat rows: width {} vs {m}", pv.cols())));
                    }
                    n += pv.rows();
                    data.extend_from_slice(pv.data());
                }
                Tensor::new(n, m, data)?
            }
            Axis::Cols => {
                let n = self.value(parts[0]).rows();
                let mut m = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if pv.rows() != n {
                        return Err(shape_err(format!("concat cols: height {} vs {n}", pv.rows())));
                    }
                    m += pv.cols();
                }
                let mut out = Tensor::zeros(n, m);
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    for i in 0..n {
                        out.data_mut()[i * m + off..i * m + off + pv.cols()].copy_from_slice(pv.row(i));
                    }
                    off += pv.cols();
                }
                out
            }
        };
        let ng = self.ng(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Selects rows of `a` by index (embedding lookup, candidate selection).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var, NumError> {
        let av = self.value(a);
        let m = av.cols();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= av.rows() {
                return Err(NumError::Lookup(format!("row {r} of {}", av.rows())));
            }
            data.extend_from_slice(av.row(r));
        }
        let out = Tensor::new(rows.len(), m, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Gather(a, rows.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(shape_err(format!("columns {start}..{end} of {:?}", av.shape())));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(av.rows() * w);
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        let out = Tensor::new(av.rows(), w, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var, NumError> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        if n == 0 || m == 0 {
            return Err(shape_err("mean of an empty tensor".into()));
        }
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0f64; m];
                for i in 0..n {
                    for (s, &x) in acc.iter_mut().zip(av.row(i)) {
                        *s += x.f64();
                    }
                }
                Tensor::row_vector(acc.into_iter().map(|s| T::of(s / n as f64)).collect())
            }
            Axis::Cols => {
                let data = (0..n)
                    .map(|i| T::of(av.row(i).iter().map(|x| x.f64()).sum::<f64>() / m as f64))
                    .collect();
                Tensor::new(n, 1, data)?
            }
        };
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Mean(a, axis), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), ng)
    }

    /// Euclidean norm of all entries, as a `1 x 1` tensor.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = sum_sq(self.value(a).data()).sqrt();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(T::of(s)), Op::L2Norm(a), ng)
    }

    /// Cosine similarity of two same-shape tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "cosine")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let na = sum_sq(av).sqrt();
        let nb = sum_sq(bv).sqrt();
        if na <= NORM_EPS || nb <= NORM_EPS {
            return Err(NumError::NearZeroNorm);
        }
        let c = (dot(av, bv) / (na * nb)).clamp(-1.0, 1.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(T::of(c)), Op::Cosine { a, b, na, nb }, ng))
    }

    /// `-log softmax(logits)[target]` for a `1 x n` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumError> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(shape_err(format!("cross_entropy expects a row, got {:?}", lv.shape())));
        }
        if target >= lv.cols() {
            return Err(NumError::Index { index: target, len: lv.cols() });
        }
        let row: Vec<f64> = lv.data().iter().map(|x| x.f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - row[target];
        let probs = row.iter().map(|x| (x - lse).exp()).collect();
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(T::of(loss)), Op::CrossEntropy { logits, target, probs }, ng))
    }

    /// Multi-head scaled dot-product attention, without projections.
    ///
    /// `q` is `nq x d`, `k` and `v` are `nk x d`; heads split the width
    /// evenly. Keys whose mask entry is `false` get a score of minus
    /// infinity: they are skipped in every sum and receive weight exactly
    /// zero, so the output equals the output without those keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var, NumError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("width {d} not divisible into {heads} heads")));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(shape_err(format!(
                "attention q {:?} k {:?} v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (nq, nk) = (qv.rows(), kv.rows());
        if let Some(mask) = key_mask {
            if mask.len() != nk {
                return Err(shape_err(format!("mask of {} for {nk} keys", mask.len())));
            }
        }
        let live: Vec<usize> = (0..nk).filter(|&j| key_mask.is_none_or(|m| m[j])).collect();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![T::zero(); heads * nq * nk];
        let mut out = Tensor::zeros(nq, d);
        let mut scores = vec![0.0f64; live.len()];
        let mut acc = vec![0.0f64; dh];
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            for i in 0..nq {
                if live.is_empty() {
                    continue;
                }
                let qi = &qv.row(i)[c0..c1];
                for (s, &j) in scores.iter_mut().zip(&live) {
                    *s = dot(qi, &kv.row(j)[c0..c1]) * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let wrow = &mut weights[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                for (s, &j) in scores.iter().zip(&live) {
                    let w = s / total;
                    wrow[j] = T::of(w);
                    for (a, &x) in acc.iter_mut().zip(&vv.row(j)[c0..c1]) {
                        *a += w * x.f64();
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out.set(i, c0 + c, T::of(*a));
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        let node = AttentionNode { q, k, v, heads, mask: key_mask.map(|m| m.to_vec()), weights };
        Ok(self.push(out, Op::Attention(Box::new(node)), ng))
    }

    /// Attention weights of an attention node, laid out `heads x nq x nk`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention(a) => Some((&a.weights, a.heads)),
            _ => None,
        }
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumError::Contract(format!("backward from a non-scalar {:?}", lv.shape())));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(T::one()))])
    }

    /// Backpropagates from arbitrary seed gradients. Equivalent to
    /// differentiating `sum_i <seed_i, var_i>`.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>, NumError> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(shape_err(format!(
                    "seed {:?} for node {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
            match &mut grads[v.0] {
                Some(e) => add_assign(e, g.data()),
                None => grads[v.0] = Some(g.data().to_vec()),
            }
            top = top.max(v.0 + 1);
        }
        let mut result = Gradients::default();
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            match node.op {
                Op::Leaf => {
                    result.leaves.insert(i, Tensor::new(node.value.rows(), node.value.cols(), g)?);
                }
                Op::Param(id) => {
                    result.params.push((id, Tensor::new(node.value.rows(), node.value.cols(), g)?));
                }
                _ => {}
            }
        }
        result.params.sort_by_key(|(id, _)| *id);
        Ok(result)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_slot {
            ($v:expr, |$s:ident| $body:expr) => {
                if nodes[$v.0].needs_grad {
                    let len = nodes[$v.0].value.len();
                    let $s: &mut Vec<T> = grads[$v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            };
        }
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                with_slot!(*a, |s| matmul_nt_into(g, bv.data(), n, m, k, s, true));
                with_slot!(*b, |s| matmul_tn_into(av.data(), g, n, k, m, s, true));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                with_slot!(*a, |s| matmul_into(g, bv.data(), n, m, k, s, true));
                with_slot!(*b, |s| matmul_tn_into(g, av.data(), n, m, k, s, true));
            }
            Op::Add(a, b) => {
                with_slot!(*a, |s| add_assign(s, g));
                with_slot!(*b, |s| add_assign(s, g));
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |s| add_assign(s, g));
                with_slot!(*b, |s| for (x, &y) in s.iter_mut().zip(g) {
                    *x = *x - y;
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_slot!(*a, |s| for ((x, &gy), &bb) in s.iter_mut().zip(g).zip(bv) {
                    *x = *x + gy * bb;
                });
                with_slot!(*b, |s| for ((x, &gy), &aa) in s.iter_mut().zip(g).zip(av) {
                    *x = *x + gy * aa;
                });
            }
            Op::AddRow(a, r) => {
                with_slot!(*a, |s| add_assign(s, g));
                let m = out.cols();
                with_slot!(*r, |s| {
                    let mut acc = vec![0.0f64; m];
                    for row in g.chunks(m.max(1)) {
                        for (a, &x) in acc.iter_mut().zip(row) {
                            *a += x.f64();
                        }
                    }
                    for (x, a) in s.iter_mut().zip(acc) {
                        *x = T::of(x.f64() + a);
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                with_slot!(*a, |s| for (x, &gy) in s.iter_mut().zip(g) {
                    *x = *x + gy * c;
                });
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                with_slot!(*a, |s| for ((x, &gy), &v) in s.iter_mut().zip(g).zip(av) {
                    if v > T::zero() {
                        *x = *x + gy;
                    }
                });
            }
            Op::Tanh(a) => {
                with_slot!(*a, |s| for ((x, &gy), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *x = *x + gy * (T::one() - y * y);
                });
            }
            Op::Sigmoid(a) => {
                with_slot!(*a, |s| for ((x, &gy), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *x = *x + gy * y * (T::one() - y);
                });
            }
            Op::Softmax(a, axis) => {
                let (n, m) = (out.rows(), out.cols());
                with_slot!(*a, |s| match axis {
                    Axis::Cols => {
                        for i in 0..n {
                            let y = out.row(i);
                            let gi = &g[i * m..(i + 1) * m];
                            let inner = dot(gi, y);
                            for j in 0..m {
                                let v = y[j].f64() * (gi[j].f64() - inner);
                                s[i * m + j] = T::of(s[i * m + j].f64() + v);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..m {
                            let inner: f64 = (0..n).map(|i| g[i * m + j].f64() * out.get(i, j).f64()).sum();
                            for i in 0..n {
                                let v = out.get(i, j).f64() * (g[i * m + j].f64() - inner);
                                s[i * m + j] = T::of(s[i * m + j].f64() + v);
                            }
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                with_slot!(*a, |s| for ((x, &gy), &k) in s.iter_mut().zip(g).zip(mask) {
                    *x = *x + gy * k;
                });
            }
            Op::Concat(parts, axis) => {
                let m = out.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = &nodes[p.0].value;
                    match axis {
                        Axis::Rows => {
                            let len = pv.len();
                            with_slot!(p, |s| add_assign(s, &g[off..off + len]));
                            off += len;
                        }
                        Axis::Cols => {
                            let w = pv.cols();
                            with_slot!(p, |s| for i in 0..pv.rows() {
                                add_assign(&mut s[i * w..(i + 1) * w], &g[i * m + off..i * m + off + w]);
                            });
                            off += w;
                        }
                    }
                }
            }
            Op::Gather(a, rows) => {
                let m = out.cols();
                with_slot!(*a, |s| for (r, &src) in rows.iter().enumerate() {
                    add_assign(&mut s[src * m..(src + 1) * m], &g[r * m..(r + 1) * m]);
                });
            }
            Op::SliceCols(a, start) => {
                let w = out.cols();
                let m = nodes[a.0].value.cols();
                with_slot!(*a, |s| for i in 0..out.rows() {
                    add_assign(&mut s[i * m + start..i * m + start + w], &g[i * w..(i + 1) * w]);
                });
            }
            Op::Mean(a, axis) => {
                let av = &nodes[a.0].value;
                let (n, m) = (av.rows(), av.cols());
                with_slot!(*a, |s| match axis {
                    Axis::Rows => {
                        for i in 0..n {
                            for j in 0..m {
                                s[i * m + j] = T::of(s[i * m + j].f64() + g[j].f64() / n as f64);
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..n {
                            let gi = g[i].f64() / m as f64;
                            for j in 0..m {
                                s[i * m + j] = T::of(s[i * m + j].f64() + gi);
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                with_slot!(*a, |s| s.iter_mut().for_each(|x| *x = *x + g0));
            }
            Op::L2Norm(a) => {
                let y = out.item().f64();
                if y > 0.0 {
                    let c = g[0].f64() / y;
                    let av = nodes[a.0].value.data();
                    with_slot!(*a, |s| for (x, &v) in s.iter_mut().zip(av) {
                        *x = T::of(x.f64() + c * v.f64());
                    });
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let c = out.item().f64();
                let g0 = g[0].f64();
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_slot!(*a, |s| for ((x, &ai), &bi) in s.iter_mut().zip(av).zip(bv) {
                    let d = bi.f64() / (na * nb) - c * ai.f64() / (na * na);
                    *x = T::of(x.f64() + g0 * d);
                });
                with_slot!(*b, |s| for ((x, &ai), &bi) in s.iter_mut().zip(av).zip(bv) {
                    let d = ai.f64() / (na * nb) - c * bi.f64() / (nb * nb);
                    *x = T::of(x.f64() + g0 * d);
                });
            }
            Op::CrossEntropy { logits, target, probs } => {
                let g0 = g[0].f64();
                with_slot!(*logits, |s| for (j, (x, &p)) in s.iter_mut().zip(probs).enumerate() {
                    let t = if j == *target { 1.0 } else { 0.0 };
                    *x = T::of(x.f64() + g0 * (p - t));
                });
            }
            Op::Attention(att) => self.backprop_attention(att, g, grads),
        }
    }

    fn backprop_attention(&self, att: &AttentionNode<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let (qv, kv, vv) = (&nodes[att.q.0].value, &nodes[att.k.0].value, &nodes[att.v.0].value);
        let d = qv.cols();
        let (nq, nk) = (qv.rows(), kv.rows());
        let dh = d / att.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let live: Vec<usize> = (0..nk).filter(|&j| att.mask.as_ref().is_none_or(|m| m[j])).collect();
        let mut dq = vec![0.0f64; nq * d];
        let mut dk = vec![0.0f64; nk * d];
        let mut dv = vec![0.0f64; nk * d];
        let mut dw = vec![0.0f64; nk];
        for h in 0..att.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            for i in 0..nq {
                let wrow = &att.weights[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let gi = &g[i * d + c0..i * d + c1];
                let mut inner = 0.0;
                for &j in &live {
                    let w = wrow[j].f64();
                    let vj = &vv.row(j)[c0..c1];
                    dw[j] = dot(gi, vj);
                    inner += w * dw[j];
                    for (c, &gc) in gi.iter().enumerate() {
                        dv[j * d + c0 + c] += w * gc.f64();
                    }
                }
                let qi = &qv.row(i)[c0..c1];
                for &j in &live {
                    let ds = wrow[j].f64() * (dw[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv.row(j)[c0..c1];
                    for c in 0..dh {
                        dq[i * d + c0 + c] += ds * kj[c].f64();
                        dk[j * d + c0 + c] += ds * qi[c].f64();
                    }
                }
            }
        }
        for (var, delta) in [(att.q, dq), (att.k, dk), (att.v, dv)] {
            if !nodes[var.0].needs_grad {
                continue;
            }
            let len = nodes[var.0].value.len();
            let s = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
            for (x, dd) in s.iter_mut().zip(delta) {
                *x = T::of(x.f64() + dd);
            }
        }
    }
}

fn softmax_f64(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
