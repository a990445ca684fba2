//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its value and
//! the indices of its inputs. `backward` walks the nodes in reverse creation
//! order, which is a valid topological order because inputs always precede
//! the nodes that consume them.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::DiffError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Outer(Var, Var),
    MaskedSoftmax(Var, Vec<bool>),
    MaskedLogSoftmax(Var, Vec<bool>),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    Select(Var, usize),
    Row(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation over parameters from one [`ParamStore`].
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    dropout_rate: f64,
    rng: Option<ChaCha8Rng>,
    consumed: bool,
}

fn mismatch(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

impl<'p> Tape<'p> {
    /// Inference tape: dropout is the identity.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            dropout_rate: 0.0,
            rng: None,
            consumed: false,
        }
    }

    /// Training tape: dropout draws its masks from `rng` at the store's rate.
    pub fn training(store: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rate: store.dropout_rate,
            rng: Some(rng),
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `len`. Vars past that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Matrix product. `a` is `[m, k]` or a row `[k]`; `b` is `[k, n]` or a
    /// column `[k]`. Rank-1 operands drop the corresponding output axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let bad = || mismatch("matmul", format!("{:?} x {:?}", av.shape(), bv.shape()));
        if av.rank() == 0 || bv.rank() == 0 {
            return Err(bad());
        }
        let (m, k) = av.dims2();
        let (k2, n) = col_dims(bv);
        if k != k2 {
            return Err(bad());
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let shape = match (av.rank(), bv.rank()) {
            (1, 1) => vec![],
            (1, _) => vec![n],
            (_, 1) => vec![m],
            _ => vec![m, n],
        };
        Ok(self.push(Tensor::with_shape(shape, out), Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor::with_shape(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds vector `row` (shape `[n]`) to every row of `x` (`[m, n]` or `[n]`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, DiffError> {
        let (xv, rv) = (self.value(x), self.value(row));
        let (_, n) = xv.dims2();
        if rv.rank() != 1 || rv.len() != n || xv.rank() == 0 {
            return Err(mismatch("add_row", format!("{:?} + {:?}", xv.shape(), rv.shape())));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(rv.data()) {
                *d += r;
            }
        }
        let t = Tensor::with_shape(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    /// Affine map `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// Outer product of two vectors, `[m] ⊗ [n] → [m, n]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 1 || bv.rank() != 1 {
            return Err(mismatch("outer", format!("{:?} ⊗ {:?}", av.shape(), bv.shape())));
        }
        let (m, n) = (av.len(), bv.len());
        let mut data = Vec::with_capacity(m * n);
        for &x in av.data() {
            data.extend(bv.data().iter().map(|&y| x * y));
        }
        Ok(self.push(Tensor::with_shape(vec![m, n], data), Op::Outer(a, b)))
    }

    fn check_mask(&self, op: &'static str, x: Var, allowed: &[bool]) -> Result<(), DiffError> {
        let xv = self.value(x);
        if xv.rank() != 1 || xv.len() != allowed.len() {
            return Err(mismatch(op, format!("{:?} with mask of {}", xv.shape(), allowed.len())));
        }
        if !allowed.iter().any(|&a| a) {
            return Err(DiffError::AllMasked);
        }
        Ok(())
    }

    /// Softmax over the entries of a vector where `allowed[i]`; others get
    /// probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var, DiffError> {
        self.check_mask("masked_softmax", x, allowed)?;
        let t = Tensor::vector(masked_softmax_values(self.value(x).data(), allowed));
        Ok(self.push(t, Op::MaskedSoftmax(x, allowed.to_vec())))
    }

    /// Log of [`Tape::masked_softmax`]. Masked entries hold 0.0 as a finite
    /// placeholder and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var, DiffError> {
        self.check_mask("masked_log_softmax", x, allowed)?;
        let xs = self.value(x).data();
        let max = xs
            .iter()
            .zip(allowed)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let log_z = xs
            .iter()
            .zip(allowed)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| (v - max).exp())
            .sum::<f64>()
            .ln();
        let data = xs
            .iter()
            .zip(allowed)
            .map(|(&v, &a)| if a { v - max - log_z } else { 0.0 })
            .collect();
        Ok(self.push(Tensor::vector(data), Op::MaskedLogSoftmax(x, allowed.to_vec())))
    }

    /// Independent softmax over each row of a matrix (or over a vector).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(mismatch("softmax_rows", "scalar input".into()));
        }
        let (_, n) = xv.dims2();
        let all = vec![true; n];
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            data.extend(masked_softmax_values(row, &all));
        }
        let t = Tensor::with_shape(xv.shape().to_vec(), data);
        Ok(self.push(t, Op::SoftmaxRows(x)))
    }

    /// Concatenation of vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 1 {
                return Err(mismatch("concat", format!("part of shape {:?}", pv.shape())));
            }
            data.extend_from_slice(pv.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Flat element `i` as a scalar.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if i >= xv.len() {
            return Err(mismatch("select", format!("index {i} of {:?}", xv.shape())));
        }
        let t = Tensor::scalar(xv.data()[i]);
        Ok(self.push(t, Op::Select(x, i)))
    }

    /// Row `i` of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if xv.rank() != 2 || i >= xv.shape()[0] {
            return Err(mismatch("row", format!("row {i} of {:?}", xv.shape())));
        }
        let n = xv.shape()[1];
        let t = Tensor::vector(xv.data()[i * n..(i + 1) * n].to_vec());
        Ok(self.push(t, Op::Row(x, i)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push(t, Op::Mean(x))
    }

    /// Column means of a matrix, `[m, n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(mismatch("mean_rows", format!("{:?}", xv.shape())));
        }
        let (m, n) = xv.dims2();
        let mut out = vec![0.0; n];
        for row in xv.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x)))
    }

    /// Inverted dropout. Identity on inference tapes or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Var {
        let rate = self.dropout_rate;
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let xv = &self.nodes[x.0].value;
        let t = Tensor::with_shape(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        );
        self.push(t, Op::Dropout(x, mask))
    }

    /// Reverse pass from a scalar output with seed gradient `seed`.
    pub fn backward(&mut self, output: Var, seed: f64) -> Result<Gradients, DiffError> {
        let shape = self.value(output).shape().to_vec();
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(mismatch("backward", format!("non-scalar output {shape:?}")));
        }
        let g = Tensor::with_shape(shape, vec![seed]);
        self.backward_seeded(&[(output, g)])
    }

    /// Reverse pass from several outputs with explicit seed gradients. A tape
    /// can be differentiated once; rebuild it to differentiate again.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor)]) -> Result<Gradients, DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(mismatch(
                    "backward",
                    format!("seed {:?} for output {:?}", g.shape(), self.value(*v).shape()),
                ));
            }
            accumulate(&mut grads, *v, g.clone());
        }

        let mut out = Gradients::for_store(self.store);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2();
                    let (_, n) = col_dims(bv);
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut grads, *a, Tensor::with_shape(av.shape().to_vec(), ga));
                    accumulate(&mut grads, *b, Tensor::with_shape(bv.shape().to_vec(), gb));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |d, y| d * y);
                    let gb = zip(&g, self.value(*a), |d, x| d * x);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let n = self.value(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, Tensor::vector(gr));
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Tanh(x) => {
                    let gx = zip(&g, &node.value, |d, y| d * (1.0 - y * y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip(&g, &node.value, |d, y| d * y * (1.0 - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Outer(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = bv.len();
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; n];
                    for (i, row) in g.data().chunks(n).enumerate() {
                        let ai = av.data()[i];
                        let mut dot = 0.0;
                        for (j, &d) in row.iter().enumerate() {
                            dot += d * bv.data()[j];
                            gb[j] += d * ai;
                        }
                        ga[i] = dot;
                    }
                    accumulate(&mut grads, *a, Tensor::vector(ga));
                    accumulate(&mut grads, *b, Tensor::vector(gb));
                }
                Op::MaskedSoftmax(x, allowed) => {
                    let y = node.value.data();
                    let dot: f64 = y.iter().zip(g.data()).map(|(p, d)| p * d).sum();
                    let gx = y
                        .iter()
                        .zip(g.data())
                        .zip(allowed)
                        .map(|((p, d), &a)| if a { p * (d - dot) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::vector(gx));
                }
                Op::MaskedLogSoftmax(x, allowed) => {
                    let y = node.value.data();
                    let total: f64 = g.data().iter().zip(allowed).filter(|(_, &a)| a).map(|(d, _)| d).sum();
                    let gx = y
                        .iter()
                        .zip(g.data())
                        .zip(allowed)
                        .map(|((ly, d), &a)| if a { d - ly.exp() * total } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::vector(gx));
                }
                Op::SoftmaxRows(x) => {
                    let (_, n) = node.value.dims2();
                    let mut gx = Vec::with_capacity(node.value.len());
                    for (yr, gr) in node.value.data().chunks(n).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        gx.extend(yr.iter().zip(gr).map(|(p, d)| p * (d - dot)));
                    }
                    let t = Tensor::with_shape(node.value.shape().to_vec(), gx);
                    accumulate(&mut grads, *x, t);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let slice = g.data()[off..off + len].to_vec();
                        off += len;
                        accumulate(&mut grads, p, Tensor::vector(slice));
                    }
                }
                Op::Select(x, i) => {
                    let mut gx = Tensor::zeros_like(self.value(*x));
                    gx.data_mut()[*i] = g.item();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Row(x, i) => {
                    let mut gx = Tensor::zeros_like(self.value(*x));
                    let n = g.len();
                    gx.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let d = g.item();
                    let gx = self.value(*x).map(|_| d);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let d = g.item() / xv.len() as f64;
                    let gx = xv.map(|_| d);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let (m, _) = xv.dims2();
                    let mut data = Vec::with_capacity(xv.len());
                    for _ in 0..m {
                        data.extend(g.data().iter().map(|d| d / m as f64));
                    }
                    accumulate(&mut grads, *x, Tensor::with_shape(xv.shape().to_vec(), data));
                }
                Op::Dropout(x, mask) => {
                    let gx = Tensor::with_shape(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(d, m)| d * m).collect(),
                    );
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(out)
    }
}

/// Dimensions of a right-hand matmul operand; vectors act as columns.
fn col_dims(t: &Tensor) -> (usize, usize) {
    if t.rank() == 1 {
        (t.len(), 1)
    } else {
        t.dims2()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::with_shape(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Hyperbolic tangent. Away from zero a single `exp` is within a few ulp of
/// `f64::tanh` and several times cheaper.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.55 {
        x.tanh()
    } else if a > 19.1 {
        1.0f64.copysign(x)
    } else {
        (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).copysign(x)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax restricted to allowed entries.
pub fn masked_softmax_values(xs: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = xs
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs
        .iter()
        .zip(allowed)
        .map(|(&v, &a)| if a { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}
