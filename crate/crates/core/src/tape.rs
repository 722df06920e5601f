//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward op appends a node to a [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the nodes in reverse recording order and
//! returns a [`Gradients`] table. Nodes whose inputs are all frozen never
//! receive a gradient buffer, so frozen leaves stay untouched.
//!
//! The tape is generic over the scalar type. Training runs in `f32`;
//! gradient checks can replay the same graph in `f64`.

use std::borrow::Cow;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar type a tape can run in.
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    /// Views `f32` storage as this scalar type, borrowing when no conversion is needed.
    fn lift(data: &[f32]) -> Cow<'_, [Self]>;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Real for f32 {
    fn lift(data: &[f32]) -> Cow<'_, [f32]> {
        Cow::Borrowed(data)
    }
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lift(data: &[f32]) -> Cow<'_, [f64]> {
        Cow::Owned(data.iter().map(|&x| x as f64).collect())
    }
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var, cols: usize },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var, cols: usize },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, n: usize, d: usize, probs: Vec<T> },
    L2Normalize { a: Var, cols: usize, norms: Vec<T> },
    Concat { parts: Vec<Var> },
    Slice { a: Var, offset: usize },
    Reshape { a: Var },
    Sum { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, cols: usize, probs: Vec<T> },
}

struct Node<'a, T: Real> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` is frozen or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of recorded ops the backward pass replayed.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (if cols == 0 { 0 } else { numel / cols }, cols)
}

fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf. Trainability follows `Tensor::requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(T::lift(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Registers owned data as a leaf.
    pub fn input(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("input", &shape, &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        match &*self.nodes[v.0].value {
            [x] => Ok(*x),
            other => Err(Error::Contract(format!("expected scalar, got {} elements", other.len()))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = x[i * cols + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), vec![cols, rows], Op::Transpose { a, rows, cols }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Mul { a, b }, rg))
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(a));
        if self.value(row).len() != cols {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::AddRow { a, row, cols }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Scale { a, s }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Gelu { a }, rg)
    }

    /// Normalizes each row over its last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_of(self.shape(x));
        if cols == 0 || self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::dim("layernorm", self.shape(x), self.shape(gain)));
        }
        let (xs, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let n = T::of(cols as f64);
        let mut out = vec![T::zero(); rows * cols];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm { x, gain, bias, cols, xhat, rstd };
        Ok(self.push(Cow::Owned(out), self.shape(x).to_vec(), op, rg))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.shape(a));
        let x = self.value(a);
        if cols == 0 {
            return Err(Error::dim("softmax", self.shape(a), &[1]));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains NaN or Inf".into()));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(cols) {
            softmax_into(row, &mut out);
        }
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::Softmax { a, cols }, rg))
    }

    /// Gathers rows of a `[V, d]` table. The backward pass scatter-adds.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("gather", s, &[2]));
        }
        let (vocab, cols) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("token id {bad} out of range for table of {vocab} rows")));
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * cols..(i + 1) * cols].iter().copied()).collect();
        let rg = self.rg(table);
        let op = Op::Gather { table, ids: ids.to_vec(), cols };
        Ok(self.push(Cow::Owned(out), vec![ids.len(), cols], op, rg))
    }

    /// Multi-head scaled dot-product attention over `[n, d]` inputs.
    ///
    /// With `causal`, position `i` attends to positions `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let s = self.shape(q);
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(Error::dim("attention", s, &[heads]));
        }
        let (n, d) = (s[0], s[1]);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); n * d];
        let mut probs = vec![T::zero(); heads * n * n];
        let mut scores = Vec::with_capacity(n);
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let span = if causal { i + 1 } else { n };
                let qi = &qs[i * d + off..i * d + off + dh];
                scores.clear();
                for j in 0..span {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    scores.push(qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale);
                }
                let p = &mut probs[(h * n + i) * n..(h * n + i) * n + span];
                let mut tmp = Vec::with_capacity(span);
                softmax_into(&scores, &mut tmp);
                p.copy_from_slice(&tmp);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention { q, k, v, heads, n, d, probs };
        Ok(self.push(Cow::Owned(out), vec![n, d], op, rg))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rows_of(self.shape(a));
        let x = self.value(a);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(cols.max(1)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric("cannot normalize a zero-norm or non-finite vector".into()));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), self.shape(a).to_vec(), Op::L2Normalize { a, cols, norms }, rg))
    }

    /// Concatenates along the first axis. All parts must share the trailing shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            rows += s[0];
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Cow::Owned(out), shape, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::Contract(format!(
                "row slice {start}..{} out of range for shape {s:?}",
                start + len
            )));
        }
        let width: usize = s[1..].iter().product();
        let out = self.value(a)[start * width..(start + len) * width].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape, Op::Slice { a, offset: start * width }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![total]), vec![1], Op::Sum { a }, rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_of(self.shape(logits));
        if labels.len() != rows || rows == 0 {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Contract(format!("label {bad} out of range for {cols} classes")));
        }
        let x = self.value(logits);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cross-entropy logits contain NaN or Inf".into()));
        }
        let mut probs = Vec::with_capacity(x.len());
        let mut total = T::zero();
        for (row, &label) in x.chunks(cols).zip(labels) {
            total += log_sum_exp(row) - row[label];
            softmax_into(row, &mut probs);
        }
        let loss = total / T::of(rows as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), cols, probs };
        Ok(self.push(Cow::Owned(vec![loss]), vec![1], op, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss is not on this tape".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", node.shape)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if !node.requires_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
            }
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            &Op::Transpose { a, rows, cols } => acc(a, &mut |ga| {
                for i in 0..rows {
                    for j in 0..cols {
                        ga[i * cols + j] += g[j * rows + i];
                    }
                }
            }),
            &Op::Add { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            &Op::AddRow { a, row, cols } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(row, &mut |gr| {
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::Scale { a, s } => acc(a, &mut |ga| {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }),
            &Op::Gelu { a } => {
                let x = self.value(a);
                acc(a, &mut |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_grad(xi);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
                let cols = *cols;
                let gv = self.value(*gain);
                acc(*gain, &mut |gg| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for grow in g.chunks(cols) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    let n = T::of(cols as f64);
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let dh: Vec<T> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            gx[r * cols + c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                });
            }
            &Op::Softmax { a, cols } => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for ((orow, grow), yrow) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..cols {
                            orow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids, cols } => acc(*table, &mut |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::Attention { q, k, v, heads, n, d, probs } => {
                self.attention_backward(*q, *k, *v, *heads, *n, *d, probs, g, &mut acc);
            }
            Op::L2Normalize { a, cols, norms } => {
                let y = &node.value;
                let cols = (*cols).max(1);
                acc(*a, &mut |ga| {
                    for (r, ((orow, grow), yrow)) in
                        ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)).enumerate()
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..cols {
                            orow[c] += (grow[c] - yrow[c] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::Slice { a, offset } => acc(a, &mut |ga| add_into(&mut ga[offset..offset + g.len()], g)),
            &Op::Reshape { a } => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Sum { a } => acc(a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::CrossEntropy { logits, labels, cols, probs } => {
                let scale = g[0] / T::of(labels.len() as f64);
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..*cols {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        n: usize,
        d: usize,
        probs: &[T],
        g: &[T],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [T])),
    ) {
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gv = vec![T::zero(); n * d];
        let mut ds = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut dot = T::zero();
                for j in 0..n {
                    if p[j] == T::zero() {
                        ds[j] = T::zero();
                        continue;
                    }
                    let vj = &vs[j * d + off..j * d + off + dh];
                    let dp = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    ds[j] = dp;
                    dot += p[j] * dp;
                    for (o, &x) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *o += p[j] * x;
                    }
                }
                for j in 0..n {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let s = p[j] * (ds[j] - dot) * scale;
                    for c in 0..dh {
                        gq[i * d + off + c] += s * ks[j * d + off + c];
                        gk[j * d + off + c] += s * qs[i * d + off + c];
                    }
                }
            }
        }
        acc(q, &mut |o| add_into(o, &gq));
        acc(k, &mut |o| add_into(o, &gk));
        acc(v, &mut |o| add_into(o, &gv));
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

fn softmax_into<T: Real>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut total = T::zero();
    for &x in row {
        let e = (x - max).exp();
        total += e;
        out.push(e);
    }
    for o in &mut out[start..] {
        *o /= total;
    }
}
