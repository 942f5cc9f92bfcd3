//! Reverse-mode differentiation over a recorded tape of tensor primitives.
//!
//! A [`Graph`] records every primitive eagerly: the forward value is
//! computed when the node is pushed, shape errors surface at that moment,
//! and [`Graph::backward`] walks the tape in reverse. Only the primitive
//! set exposed as methods on [`Graph`] exists; there is no way to record an
//! unsupported operation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    Gelu(Var),
    Mean(Var),
    SumSquares(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Tape of primitives with eagerly computed values.
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn broadcasts_over(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        // SAFETY: row-major buffers of the checked sizes.
        unsafe {
            E::gemm(
                m,
                k,
                n,
                da.as_ptr(),
                k as isize,
                1,
                db.as_ptr(),
                n as isize,
                1,
                E::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng, "matmul")
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcasts_over(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % nb]))
            .collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    /// Elementwise sum; `b` may match the trailing dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    /// Elementwise difference; `b` may match the trailing dimensions of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng, "sub")
    }

    /// Elementwise product; `b` may match the trailing dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let k = E::from_f64_lossy(s);
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng, "scale")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng, "reshape")
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), ng, "transpose")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().expect("rank >= 1");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::Softmax(a), ng, "softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        let n = *v.shape().last().expect("rank >= 1");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let (mean, inv) = row_stats(row, eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.ng(&[a]);
        self.push(t, Op::LayerNorm(a, eps), ng, "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(t, Op::Gelu(a), ng, "gelu")
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().fold(E::zero(), |acc, &x| acc + x);
        let t = Tensor::scalar(s / E::from_f64_lossy(v.len() as f64));
        let ng = self.ng(&[a]);
        self.push(t, Op::Mean(a), ng, "mean")
    }

    /// Sum of squared elements, as a `[1]` tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().fold(E::zero(), |acc, &x| acc + x * x);
        let t = Tensor::scalar(s);
        let ng = self.ng(&[a]);
        self.push(t, Op::SumSquares(a), ng, "sum_squares")
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let ng = self.ng(&[a]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x: a, axis, start },
            ng,
            "slice",
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let w = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ng = self.ng(parts);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
            "concat",
        )
    }

    /// Rows of a `[vocab, d]` table selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", &s, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("embedding", &s, &[bad]));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
            "embedding",
        )
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        let v = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &l) in v.chunks(c).zip(labels) {
            let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x)).as_f64();
            let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[l].as_f64();
        }
        let t = Tensor::scalar(E::from_f64_lossy(total / labels.len() as f64));
        let ng = self.ng(&[logits]);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
            "cross_entropy",
        )
    }

    /// Reverse pass from a `[1]`-shaped output.
    pub fn backward(&self, out: Var) -> Result<Gradients<E>> {
        if self.value(out).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::from_parts(
            self.shape(out).to_vec(),
            vec![E::one()],
        ));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![E::zero(); m * k];
                    // dA = dC * B^T
                    unsafe {
                        E::gemm(
                            m,
                            n,
                            k,
                            g.data().as_ptr(),
                            n as isize,
                            1,
                            vb.data().as_ptr(),
                            1,
                            n as isize,
                            E::zero(),
                            da.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![E::zero(); k * n];
                    // dB = A^T * dC
                    unsafe {
                        E::gemm(
                            k,
                            m,
                            n,
                            va.data().as_ptr(),
                            1,
                            k as isize,
                            g.data().as_ptr(),
                            n as isize,
                            1,
                            E::zero(),
                            db.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -E::one()
                } else {
                    E::one()
                };
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    let reduced = reduce_broadcast(g, self.shape(*b));
                    accumulate(grads, *b, reduced.map(|x| x * sign));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.len();
                if self.requires_grad(*a) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * vb.data()[j % nb])
                        .collect();
                    accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let full: Vec<E> = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &x)| gv * x)
                        .collect();
                    let full = Tensor::from_parts(va.shape().to_vec(), full);
                    accumulate(grads, *b, reduce_broadcast(&full, vb.shape()));
                }
            }
            Op::Scale(a, s) => {
                let k = E::from_f64_lossy(*s);
                accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::Reshape(a) => {
                let t = Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec());
                accumulate(grads, *a, t);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut out = vec![E::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g.data()[j * r + i];
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(vec![r, c], out));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot = yr.iter().zip(gr).fold(E::zero(), |acc, (&p, &q)| acc + p * q);
                    out.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let y = &node.value;
                let n = *x.shape().last().expect("rank >= 1");
                let nf = E::from_f64_lossy(n as f64);
                let mut out = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let (_, inv) = row_stats(xr, *eps);
                    let mg = gr.iter().fold(E::zero(), |acc, &q| acc + q) / nf;
                    let mgy = gr.iter().zip(yr).fold(E::zero(), |acc, (&q, &p)| acc + q * p) / nf;
                    out.extend(gr.iter().zip(yr).map(|(&q, &p)| inv * (q - mg - p * mgy)));
                }
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), out));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g.data()[0] / E::from_f64_lossy(n as f64);
                accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), vec![v; n]));
            }
            Op::SumSquares(a) => {
                let two = E::from_f64_lossy(2.0) * g.data()[0];
                accumulate(grads, *a, self.value(*a).map(|x| x * two));
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let (outer, inner) = outer_inner(&s, *axis);
                let mut out = vec![E::zero(); s.iter().product()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                accumulate(grads, *x, Tensor::from_parts(s, out));
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let (outer, inner) = outer_inner(s, *axis);
                let row = s[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.shape(*p).to_vec();
                    let w = ps[*axis] * inner;
                    if self.requires_grad(*p) {
                        let mut out = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = o * row + offset;
                            out.extend_from_slice(&g.data()[base..base + w]);
                        }
                        accumulate(grads, *p, Tensor::from_parts(ps, out));
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut out = vec![E::zero(); s[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        out[id * d + j] = out[id * d + j] + g.data()[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(s, out));
            }
            Op::CrossEntropy { logits, labels } => {
                let v = self.value(*logits);
                let c = v.shape()[1];
                let scale = g.data()[0] / E::from_f64_lossy(labels.len() as f64);
                let mut out = v.data().to_vec();
                for (row, &l) in out.chunks_mut(c).zip(labels) {
                    softmax_row(row);
                    row[l] = row[l] - E::one();
                    for x in row.iter_mut() {
                        *x = *x * scale;
                    }
                }
                accumulate(grads, *logits, Tensor::from_parts(v.shape().to_vec(), out));
            }
        }
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Tensor<E>>], v: Var, t: Tensor<E>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn reduce_broadcast<E: Element>(g: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if g.shape() == target {
        return g.clone();
    }
    let n: usize = target.iter().product();
    let mut out = vec![E::zero(); n];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % n] = out[i % n] + v;
    }
    Tensor::from_parts(target.to_vec(), out)
}

fn softmax_row<E: Element>(row: &mut [E]) {
    let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
    let mut sum = E::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn row_stats<E: Element>(row: &[E], eps: f64) -> (E, E) {
    let n = E::from_f64_lossy(row.len() as f64);
    let mean = row.iter().fold(E::zero(), |a, &x| a + x) / n;
    let var = row.iter().fold(E::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    (mean, (var + E::from_f64_lossy(eps)).sqrt().recip())
}

fn gelu<E: Element>(x: E) -> E {
    let half = E::from_f64_lossy(0.5);
    let u = E::from_f64_lossy(GELU_C) * (x + E::from_f64_lossy(GELU_K) * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let half = E::from_f64_lossy(0.5);
    let c = E::from_f64_lossy(GELU_C);
    let k = E::from_f64_lossy(GELU_K);
    let th = (c * (x + k * x * x * x)).tanh();
    let du = c * (E::one() + E::from_f64_lossy(3.0) * k * x * x);
    half * (E::one() + th) + half * x * (E::one() - th * th) * du
}

/// Result of [`Graph::backward`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the output w.r.t. `v`; `None` if `v` does not influence
    /// the output or does not track gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, or zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<E>) -> Tensor<E> {
        self.get(v).cloned().unwrap_or_else(|| {
            Tensor::from_parts(like.shape().to_vec(), vec![E::zero(); like.len()])
        })
    }
}

/// Named variables handed to a differentiable computation.
pub type VarMap = BTreeMap<String, Var>;

/// Looks up a named variable, failing with the missing name.
pub fn lookup(vars: &VarMap, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
}

/// Evaluates the scalar computation `f` with every entry of `params` as a
/// tracked leaf and returns `(f(params), d f / d params)`. The gradient
/// store has exactly the key set and shapes of `params`.
pub fn forward_backward<E, F>(params: &ParamStore<E>, f: F) -> Result<(f64, ParamStore<E>)>
where
    E: Element,
    F: FnOnce(&mut Graph<E>, &VarMap) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: VarMap = params
        .iter()
        .map(|(name, t)| (name.clone(), g.param(t.clone())))
        .collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).data()[0].as_f64();
    let grads = g.backward(out)?;
    let store = params
        .iter()
        .map(|(name, t)| (name.clone(), grads.get_or_zeros(vars[name], t)))
        .collect();
    Ok((value, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
        entries
            .iter()
            .map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn quadratic_gradient() {
        let p = store(&[("w", vec![1], vec![3.0])]);
        let (v, g) = forward_backward(&p, |g, vars| {
            let w = lookup(vars, "w")?;
            g.sum_squares(w)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_gradient() {
        let p = store(&[("w", vec![2, 2], vec![1.0; 4])]);
        let (v, g) = forward_backward(&p, |g, vars| {
            let w = lookup(vars, "w")?;
            let m = g.mean(w)?;
            g.scale(m, 4.0)
        })
        .unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(g.get("w").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let p = store(&[("a", vec![1], vec![2.0]), ("b", vec![3], vec![1.0, 2.0, 3.0])]);
        let (_, g) = forward_backward(&p, |g, vars| g.sum_squares(lookup(vars, "a")?)).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[0.0; 3]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap());
        let s = g.softmax(a).unwrap();
        for row in g.value(s).data().chunks(3) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_concat_roundtrip_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let l = g.slice(a, 1, 0, 1).unwrap();
        let r = g.slice(a, 1, 1, 2).unwrap();
        let c = g.concat(&[l, r], 1).unwrap();
        assert_eq!(g.value(c), g.value(a));
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn broadcast_add_requires_trailing_match() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![4, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![4]).unwrap());
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::full(vec![3], 1.0).unwrap());
        let s = g.add(a, c).unwrap();
        assert_eq!(g.value(s).data(), &[1.0; 12]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(vec![3, 2]).unwrap());
        assert!(g.embedding(t, &[0, 3]).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let p = store(&[("w", vec![2, 2], vec![0.3, -0.1, 0.7, 0.2])]);
        let run = || {
            forward_backward(&p, |g, vars| {
                let w = lookup(vars, "w")?;
                let m = g.matmul(w, w)?;
                let s = g.softmax(m)?;
                let n = g.layer_norm(s, 1e-5)?;
                let e = g.gelu(n)?;
                g.sum_squares(e)
            })
            .unwrap()
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }
}
