use rayon::prelude::*;

use super::real::{gemm, MatMut, MatRef};
use super::{dims2, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    /// tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    Gelu,
    Relu,
    Silu,
    Softplus,
    Exp,
    Recip,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    TakeCols(Var, Vec<usize>),
    MulRows(Var, Var),
    MulScalar(Var, Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    RowBilinear(Var, Var),
    ConcatCols(Var, Var),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is always topologically sorted.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; used for evaluation.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`. It participates in gradients
    /// when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.input(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "leaf shape");
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value: data,
            shape,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.input(shape, data, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.constant(shape, vec![T::zero(); n])
    }

    /// Same value, no gradient path back to `v`'s inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.constant(shape, value)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot of a node as a standalone tensor, carrying its gradient.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone())
            .expect("node shape")
            .with_requires_grad(node.requires_grad);
        if let Some(g) = &node.grad {
            t.accumulate_grad(g).expect("grad shape");
        }
        t
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `[m×k]·[k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), k, n),
            T::zero(),
            MatMut::row_major(&mut out, m, n),
        );
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    /// `[m×k]·[n×k]ᵀ → [m×n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), n, k).t(),
            T::zero(),
            MatMut::row_major(&mut out, m, n),
        );
        Ok(self.push(out, vec![m, n], Op::MatMulNt(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` (or `[1×n]`) bias to every row of `[m×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (br, bn) = self.dims(bias);
        if br != 1 || bn != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c), &[a])
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |x: T| x.tanh(),
            Unary::Gelu => gelu,
            Unary::Relu => |x: T| if x > T::zero() { x } else { T::zero() },
            Unary::Silu => |x: T| x * sigmoid(x),
            Unary::Softplus => softplus,
            Unary::Exp => |x: T| x.exp(),
            Unary::Recip => |x: T| x.recip(),
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Unary(a, kind), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let src = self.value(a);
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = vec![T::zero(); m * n];
        for (row, o) in src.chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, o);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Softmax(a), &[a]))
    }

    /// Mean token cross-entropy (nats) of row-wise logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Input(format!("target id {t} out of range for {n} classes")));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); m * n];
        let mut total = 0.0f64;
        for ((row, p), &t) in src.chunks(n).zip(probs.chunks_mut(n)).zip(targets) {
            softmax_row(row, p);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total += (lse - row[t]).to_f64().unwrap();
        }
        let loss = T::lit(total / m as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(vec![loss], vec![], op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len().max(1) as f64);
        self.push(vec![s], vec![], Op::Mean(a), &[a])
    }

    /// Column means of `[m×n]` → `[1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = vec![T::zero(); n];
        for row in self.value(a).chunks(n.max(1)) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::lit(1.0 / m.max(1) as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(out, vec![1, n], Op::MeanRows(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(out, vec![n, m], Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, shape, Op::Reshape(a), &[a]))
    }

    /// Selects rows `idx` of `[m×n]` → `[idx.len()×n]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Input(format!("row index {bad} out of range for {m} rows")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(out, vec![idx.len(), n], Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Inverse of `gather_rows`: row `r` of `a` is added into output row
    /// `idx[r]` of a zero `[out_rows×n]` matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m {
            return Err(shape_err("scatter_rows", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Input(format!("row index {bad} out of range for {out_rows} rows")));
        }
        let src = self.value(a);
        let mut out = vec![T::zero(); out_rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += x;
            }
        }
        Ok(self.push(out, vec![out_rows, n], Op::ScatterRows(a, idx.to_vec()), &[a]))
    }

    /// Per-row column pick: `idx` holds `k` column ids per row of `[m×n]`,
    /// giving `[m×k]`. Gradient flows only to picked entries.
    pub fn take_cols(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if idx.len() != m * k {
            return Err(shape_err("take_cols", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("column index {bad} out of range for {n} cols")));
        }
        let src = self.value(a);
        let out = idx
            .iter()
            .enumerate()
            .map(|(p, &c)| src[(p / k.max(1)) * n + c])
            .collect();
        Ok(self.push(out, vec![m, k], Op::TakeCols(a, idx.to_vec()), &[a]))
    }

    /// Scales row `r` of `[m×n]` by `s[r]` where `s` is `[m×1]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(s).len() != m {
            return Err(shape_err("mul_rows", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s);
        let mut out = self.value(a).to_vec();
        if n > 0 {
            for (row, &f) in out.chunks_mut(n).zip(sv) {
                row.iter_mut().for_each(|x| *x *= f);
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::MulRows(a, s), &[a, s]))
    }

    /// Multiplies every entry by a single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let f = self.value(s)[0];
        let out = self.value(a).iter().map(|&x| x * f).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::MulScalar(a, s), &[a, s]))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ gain`, row-wise.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n {
            return Err(shape_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let (src, g) = (self.value(x), self.value(gain));
        let eps = T::lit(eps);
        let inv_n = T::lit(1.0 / n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for (row, o) in src.chunks(n).zip(out.chunks_mut(n)) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_n;
            let r = (ms + eps).sqrt().recip();
            inv_rms.push(r);
            for ((o, &v), &gj) in o.iter_mut().zip(row).zip(g) {
                *o = v * r * gj;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Divides each row by its L2 norm. Zero rows are a numeric error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x);
        let mut out = vec![T::zero(); m * n];
        let mut norms = Vec::with_capacity(m);
        for (i, (row, o)) in src.chunks(n.max(1)).zip(out.chunks_mut(n.max(1))).enumerate() {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm > T::zero()) || !nrm.is_finite() {
                return Err(Error::Numeric(format!("row {i} has zero or non-finite norm")));
            }
            norms.push(nrm);
            for (o, &v) in o.iter_mut().zip(row) {
                *o = v / nrm;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq`. `q`, `k`, `v` are `[batch·seq × heads·dh]`, token-major.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(shape_err("causal_attention", self.shape(q), self.shape(k)));
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(shape_err("causal_attention", self.shape(q), &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        out.par_chunks_mut(seq * d)
            .zip(probs.par_chunks_mut(heads * seq * seq))
            .enumerate()
            .for_each(|(b, (o, p))| {
                let base = b * seq * d;
                for h in 0..heads {
                    let pb = &mut p[h * seq * seq..(h + 1) * seq * seq];
                    let view = |data| MatRef {
                        data,
                        offset: base + h * dh,
                        rows: seq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    };
                    gemm(view(qv), view(kv).t(), T::zero(), MatMut::row_major(pb, seq, seq));
                    for i in 0..seq {
                        let row = &mut pb[i * seq..(i + 1) * seq];
                        row[..=i].iter_mut().for_each(|x| *x *= scale);
                        let tmp: Vec<T> = row[..=i].to_vec();
                        softmax_row(&tmp, &mut row[..=i]);
                        row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                    }
                    gemm(
                        MatRef::row_major(pb, seq, seq),
                        view(vv),
                        T::zero(),
                        MatMut {
                            data: o,
                            offset: h * dh,
                            rows: seq,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        },
                    );
                }
            });
        let shape = self.shape(q).to_vec();
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        };
        Ok(self.push(out, shape, op, &[q, k, v]))
    }

    /// Per-row bilinear form with a row-specific matrix: `x` is `[m×h]`,
    /// `w` is `[m×(h·n)]` holding one row-major `[h×n]` matrix per row.
    pub fn row_bilinear(&mut self, x: Var, w: Var, n: usize) -> Result<Var> {
        let (m, h) = self.dims(x);
        let (mw, hn) = self.dims(w);
        if mw != m || hn != h * n {
            return Err(shape_err("row_bilinear", self.shape(x), self.shape(w)));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![T::zero(); m * n];
        for t in 0..m {
            for j in 0..h {
                let xj = xv[t * h + j];
                let wrow = &wv[t * hn + j * n..t * hn + (j + 1) * n];
                for (o, &wc) in out[t * n..(t + 1) * n].iter_mut().zip(wrow) {
                    *o += xj * wc;
                }
            }
        }
        Ok(self.push(out, vec![m, n], Op::RowBilinear(x, w), &[x, w]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims(a);
        let (mb, q) = self.dims(b);
        if m != mb {
            return Err(shape_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        Ok(self.push(out, vec![m, p + q], Op::ConcatCols(a, b), &[a, b]))
    }

    /// Repeats a single row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = self.dims(a);
        if r != 1 {
            return Err(shape_err("broadcast_rows", self.shape(a), &[1, n]));
        }
        let row = self.value(a).to_vec();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        Ok(self.push(out, vec![m, n], Op::BroadcastRows(a), &[a]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a no-grad graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, gout));
                continue;
            }
            backprop_node(nodes, node, &gout, &mut grads);
        }
        for (i, g) in leaf_grads {
            let slot = self.nodes[i].grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
        // leaves that require grad but sit off the loss path get explicit zeros
        for n in &mut self.nodes[..=loss.0] {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(vec![T::zero(); n.value.len()]);
            }
        }
        Ok(())
    }
}

fn slot<'g, T: Real>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    let dims = |v: Var| dims2(&nodes[v.0].shape);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims(*a);
            let (_, n) = dims(*b);
            let gm = MatRef::row_major(g, m, n);
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                gemm(gm, MatRef::row_major(bv, k, n).t(), T::one(), MatMut::row_major(da, m, k));
            }
            if let Some(db) = slot(grads, nodes, *b) {
                gemm(MatRef::row_major(av, m, k).t(), gm, T::one(), MatMut::row_major(db, k, n));
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = dims(*a);
            let (n, _) = dims(*b);
            let gm = MatRef::row_major(g, m, n);
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                gemm(gm, MatRef::row_major(bv, n, k), T::one(), MatMut::row_major(da, m, k));
            }
            if let Some(db) = slot(grads, nodes, *b) {
                gemm(gm.t(), MatRef::row_major(av, m, k), T::one(), MatMut::row_major(db, n, k));
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (d, &x) in db.iter_mut().zip(g) {
                    *d -= x;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv) {
                    *d += x * y;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((d, &x), &y) in db.iter_mut().zip(g).zip(av) {
                    *d += x * y;
                }
            }
        }
        Op::AddRow(a, bias) => {
            let (_, n) = dims(*a);
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *bias) {
                for row in g.chunks(n.max(1)) {
                    add_into(db, row);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x * *c;
                }
            }
        }
        Op::Unary(a, kind) => {
            let (xv, yv) = (val(*a), node.value.as_slice());
            if let Some(da) = slot(grads, nodes, *a) {
                let one = T::one();
                for (((d, &go), &x), &y) in da.iter_mut().zip(g).zip(xv).zip(yv) {
                    let deriv = match kind {
                        Unary::Sigmoid => y * (one - y),
                        Unary::Tanh => one - y * y,
                        Unary::Gelu => gelu_grad(x),
                        Unary::Relu => {
                            if x > T::zero() {
                                one
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Silu => {
                            let s = sigmoid(x);
                            s * (one + x * (one - s))
                        }
                        Unary::Softplus => sigmoid(x),
                        Unary::Exp => y,
                        Unary::Recip => -(y * y),
                    };
                    *d += go * deriv;
                }
            }
        }
        Op::Softmax(a) => {
            let (_, n) = dims(*a);
            let y = node.value.as_slice();
            if let Some(da) = slot(grads, nodes, *a) {
                for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &go), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yy * (go - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let (m, n) = dims(*logits);
            let f = g[0] / T::lit(m as f64);
            if let Some(dl) = slot(grads, nodes, *logits) {
                for (r, (dr, pr)) in dl.chunks_mut(n).zip(probs.chunks(n)).enumerate() {
                    for (d, &p) in dr.iter_mut().zip(pr) {
                        *d += f * p;
                    }
                    dr[targets[r]] -= f;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            let f = g[0] / T::lit(val(*a).len().max(1) as f64);
            if let Some(da) = slot(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += f);
            }
        }
        Op::MeanRows(a) => {
            let (m, n) = dims(*a);
            let inv = T::lit(1.0 / m.max(1) as f64);
            if let Some(da) = slot(grads, nodes, *a) {
                for row in da.chunks_mut(n.max(1)) {
                    for (d, &go) in row.iter_mut().zip(g) {
                        *d += go * inv;
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims(*a);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
        }
        Op::GatherRows(a, idx) => {
            let (_, n) = dims(*a);
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut da[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
        }
        Op::ScatterRows(a, idx) => {
            let (_, n) = dims(*a);
            if let Some(da) = slot(grads, nodes, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut da[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                }
            }
        }
        Op::TakeCols(a, idx) => {
            let (m, n) = dims(*a);
            let k = if m == 0 { 0 } else { idx.len() / m };
            if let Some(da) = slot(grads, nodes, *a) {
                for (p, &c) in idx.iter().enumerate() {
                    da[(p / k.max(1)) * n + c] += g[p];
                }
            }
        }
        Op::MulRows(a, s) => {
            let (_, n) = dims(*a);
            let (av, sv) = (val(*a), val(*s));
            if let Some(da) = slot(grads, nodes, *a) {
                for ((dr, gr), &f) in da.chunks_mut(n.max(1)).zip(g.chunks(n.max(1))).zip(sv) {
                    for (d, &go) in dr.iter_mut().zip(gr) {
                        *d += go * f;
                    }
                }
            }
            if let Some(ds) = slot(grads, nodes, *s) {
                for ((d, gr), ar) in ds.iter_mut().zip(g.chunks(n.max(1))).zip(av.chunks(n.max(1))) {
                    *d += gr.iter().zip(ar).map(|(&x, &y)| x * y).sum::<T>();
                }
            }
        }
        Op::MulScalar(a, s) => {
            let (av, f) = (val(*a), val(*s)[0]);
            if let Some(da) = slot(grads, nodes, *a) {
                for (d, &go) in da.iter_mut().zip(g) {
                    *d += go * f;
                }
            }
            if let Some(ds) = slot(grads, nodes, *s) {
                ds[0] += g.iter().zip(av).map(|(&x, &y)| x * y).sum::<T>();
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (_, n) = dims(*x);
            let (xv, gv) = (val(*x), val(*gain));
            let inv_n = T::lit(1.0 / n as f64);
            if let Some(dx) = slot(grads, nodes, *x) {
                for (((dr, gr), xr), &r) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(xv.chunks(n))
                    .zip(inv_rms)
                {
                    let dot: T = gr
                        .iter()
                        .zip(gv)
                        .zip(xr)
                        .map(|((&go, &gj), &xj)| go * gj * xj)
                        .sum();
                    let c = r * r * r * inv_n * dot;
                    for (((d, &go), &gj), &xj) in dr.iter_mut().zip(gr).zip(gv).zip(xr) {
                        *d += r * gj * go - c * xj;
                    }
                }
            }
            if let Some(dg) = slot(grads, nodes, *gain) {
                for ((gr, xr), &r) in g.chunks(n).zip(xv.chunks(n)).zip(inv_rms) {
                    for ((d, &go), &xj) in dg.iter_mut().zip(gr).zip(xr) {
                        *d += go * xj * r;
                    }
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            let (_, n) = dims(*x);
            let y = node.value.as_slice();
            if let Some(dx) = slot(grads, nodes, *x) {
                for (((dr, gr), yr), &nrm) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .zip(norms)
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &go), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += (go - yy * dot) / nrm;
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        } => {
            debug_assert_eq!(dims(*q).0, batch * seq);
            attention_backward(nodes, grads, g, (*q, *k, *v), *seq, *heads, probs)
        }
        Op::RowBilinear(x, w) => {
            let (m, h) = dims(*x);
            let (_, hn) = dims(*w);
            let n = if h == 0 { 0 } else { hn / h };
            let (xv, wv) = (val(*x), val(*w));
            if let Some(dx) = slot(grads, nodes, *x) {
                for t in 0..m {
                    for j in 0..h {
                        let wrow = &wv[t * hn + j * n..t * hn + (j + 1) * n];
                        dx[t * h + j] += g[t * n..(t + 1) * n]
                            .iter()
                            .zip(wrow)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                    }
                }
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                for t in 0..m {
                    for j in 0..h {
                        let xj = xv[t * h + j];
                        let drow = &mut dw[t * hn + j * n..t * hn + (j + 1) * n];
                        for (d, &go) in drow.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                            *d += go * xj;
                        }
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (m, p) = dims(*a);
            let (_, q) = dims(*b);
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..m {
                    add_into(&mut da[i * p..(i + 1) * p], &g[i * (p + q)..i * (p + q) + p]);
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for i in 0..m {
                    add_into(&mut db[i * q..(i + 1) * q], &g[i * (p + q) + p..(i + 1) * (p + q)]);
                }
            }
        }
        Op::BroadcastRows(a) => {
            let (_, n) = dims(*a);
            if let Some(da) = slot(grads, nodes, *a) {
                for row in g.chunks(n.max(1)) {
                    add_into(da, row);
                }
            }
        }
    }
}

fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (q, k, v): (Var, Var, Var),
    seq: usize,
    heads: usize,
    probs: &[T],
) {
    let (rows, d) = dims2(&nodes[q.0].shape);
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); rows * d];
    let mut dv = vec![T::zero(); rows * d];
    dq.par_chunks_mut(seq * d)
        .zip(dk.par_chunks_mut(seq * d))
        .zip(dv.par_chunks_mut(seq * d))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let base = b * seq * d;
            let mut dp = vec![T::zero(); seq * seq];
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let view = |data| MatRef {
                    data,
                    offset: base + h * dh,
                    rows: seq,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                let local = |data| MatMut {
                    data,
                    offset: h * dh,
                    rows: seq,
                    cols: dh,
                    rs: d,
                    cs: 1,
                };
                let pm = MatRef::row_major(p, seq, seq);
                // dV = Pᵀ·dO
                gemm(pm.t(), view(g), T::zero(), local(&mut *dvb));
                // dP = dO·Vᵀ
                gemm(view(g), view(vv).t(), T::zero(), MatMut::row_major(&mut dp, seq, seq));
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
                    }
                }
                let ds = MatRef::row_major(&dp, seq, seq);
                gemm(ds, view(kv), T::zero(), local(&mut *dqb));
                gemm(ds.t(), view(qv), T::zero(), local(&mut *dkb));
            }
        });
    for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(dst) = slot(grads, nodes, var) {
            add_into(dst, &buf);
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
    let u = c * (x + a * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_row<T: Real>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    let inv = total.recip();
    dst.iter_mut().for_each(|d| *d *= inv);
}
