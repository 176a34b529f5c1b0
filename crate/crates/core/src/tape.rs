//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and enough context to run its backward rule;
//! nodes are only ever appended, so the node list is already in topological
//! order and [`Tape::backward`] just walks it in reverse.
//!
//! Gradients are accumulated only into nodes that require them. A node
//! requires a gradient when it is a trainable leaf or when any of its inputs
//! does, which is how frozen backbone weights end up with no gradient at all.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Gelu,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<T>,
        probs: Vec<T>,
        denom: T,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftMerge {
        probs: Var,
        bank: Var,
        denom: Vec<T>,
    },
    TopkGate {
        probs: Var,
        keep: Vec<bool>,
        renormalize: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let x3 = x * x * x;
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x3);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps every output flat index of a permutation to its input flat index.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let numel: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Trainable leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
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

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul: {sa:?} x {sb:?} inner dimensions disagree"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err!("bmm: {sa:?} x {sb:?} are incompatible"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(dim_err!(
                "{what}: {sb:?} does not broadcast onto {sa:?} (trailing dimensions only)"
            ));
        }
        Ok(())
    }

    /// `a + b` with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "add")?;
        let bd = self.value(b).data();
        let n = bd.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `a * b` elementwise with `b` broadcast over the leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check(a, b, "mul")?;
        let bd = self.value(b).data();
        let n = bd.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % n])
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Dispatches one of the elementwise ops; binary ops require `b`.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, _) => Ok(self.relu(a)),
            (Elementwise::Gelu, _) => Ok(self.gelu(a)),
            (op, None) => Err(Error::Contract(format!("{op:?} needs a second operand"))),
        }
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let data = self.value(x).data();
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = 0.0f64;
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e.f64();
                }
                let inv = T::lit(1.0 / sum);
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] * inv;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {perm:?} for {shape:?}"));
        }
        let map = permute_index(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Selects rows of a rank-2 table: output `[ids.len(), cols]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("gather table must be rank 2, got {shape:?}"));
        }
        if ids.is_empty() {
            return Err(Error::Input("gather with no ids".into()));
        }
        let cols = shape[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= shape[0] {
                return Err(Error::Index(format!("row {id} out of range for {} rows", shape[0])));
            }
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(&[ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// RMS normalization over the last axis, scaled by `weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(weight) != [d] {
            return Err(dim_err!("rms_norm weight {:?} vs width {d}", self.shape(weight)));
        }
        let xs = self.value(x).data();
        let w = self.value(weight).data();
        let rows = xs.len() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let ms: f64 = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / d as f64;
            let inv = T::lit(1.0 / (ms + eps).sqrt());
            inv_rms.push(inv);
            out.extend(row.iter().zip(w).map(|(&v, &wv)| v * inv * wv));
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::RmsNorm { x, weight, inv_rms }, &[x, weight]))
    }

    /// Mean negative log-likelihood over positions with nonzero mask.
    ///
    /// `logits` is `[..., vocab]`; `targets` and `mask` have one entry per
    /// leading position.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().unwrap();
        let rows = self.value(logits).numel() / vocab;
        if targets.len() != rows || mask.len() != rows {
            return Err(dim_err!(
                "cross_entropy: {rows} positions but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            ));
        }
        if let Some(&t) = targets.iter().zip(mask).find(|(&t, _)| t >= vocab).map(|(t, _)| t) {
            return Err(Error::Index(format!("target {t} outside vocabulary of {vocab}")));
        }
        let denom: f64 = mask.iter().map(|m| m.f64()).sum();
        if denom <= 0.0 {
            return Err(Error::Input("cross_entropy mask selects no positions".into()));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); data.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &data[r * vocab..(r + 1) * vocab];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * vocab + j] = e;
                sum += e.f64();
            }
            let inv = T::lit(1.0 / sum);
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = *p * inv;
            }
            if mask[r] != T::zero() {
                let logp = (row[targets[r]] - mx).f64() - sum.ln();
                total -= mask[r].f64() * logp;
            }
        }
        let value = Tensor::scalar(T::lit(total / denom));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                denom: T::lit(denom),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s: f64 = d.iter().map(|v| v.f64()).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(T::lit(s)), Op::Mean(x), &[x])
    }

    /// Column means of a rank-2 tensor: `[rows, cols] -> [cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("mean_rows needs rank 2, got {shape:?}"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let d = self.value(x).data();
        let mut acc = vec![0.0f64; cols];
        for r in 0..rows {
            for c in 0..cols {
                acc[c] += d[r * cols + c].f64();
            }
        }
        let data = acc.iter().map(|&s| T::lit(s / rows as f64)).collect();
        let value = Tensor::new(&[cols], data)?;
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    /// Per-row convex combination of bank rows: `out[i] = Σ_e p[i,e]·bank[e] / Σ_e p[i,e]`.
    ///
    /// Dividing by the row mass keeps the result exact when every bank row
    /// is identical (e.g. all-ones vectors at initialization): the numerator
    /// and denominator are then summed in the same order and cancel to 1.
    pub fn soft_merge(&mut self, probs: Var, bank: Var) -> Result<Var> {
        let (sp, sb) = (self.shape(probs).to_vec(), self.shape(bank).to_vec());
        if sp.len() != 2 || sb.len() != 2 || sp[1] != sb[0] {
            return Err(dim_err!("soft_merge: probs {sp:?} vs bank {sb:?}"));
        }
        let (rows, n, d) = (sp[0], sp[1], sb[1]);
        let p = self.value(probs).data();
        let l = self.value(bank).data();
        let mut num = vec![T::zero(); rows * d];
        gemm(p, l, &mut num, rows, n, d);
        let ones = vec![T::one(); n];
        let mut denom = vec![T::zero(); rows];
        gemm(p, &ones, &mut denom, rows, n, 1);
        if let Some(r) = denom.iter().position(|&z| !(z > T::zero())) {
            return Err(Error::Numeric(format!("soft_merge row {r} has no probability mass")));
        }
        for r in 0..rows {
            let mass = denom[r];
            for v in &mut num[r * d..(r + 1) * d] {
                *v = *v / mass;
            }
        }
        let value = Tensor::new(&[rows, d], num)?;
        Ok(self.push(value, Op::SoftMerge { probs, bank, denom }, &[probs, bank]))
    }

    /// Keeps the `k` largest entries of each row (ties to the lower index),
    /// zeroing the rest and optionally renormalizing survivors to sum to one.
    pub fn topk_gate(&mut self, probs: Var, k: usize, renormalize: bool) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 {
            return Err(dim_err!("topk_gate needs [tokens, experts], got {shape:?}"));
        }
        let (rows, n) = (shape[0], shape[1]);
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k with k={k} over {n} experts")));
        }
        let p = self.value(probs).data();
        let mut keep = vec![false; rows * n];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &p[r * n..(r + 1) * n];
            let chosen = topk_indices(row, k);
            let mut z = T::zero();
            for &j in &chosen {
                keep[r * n + j] = true;
                z = z + row[j];
            }
            for &j in &chosen {
                out[r * n + j] = if renormalize { row[j] / z } else { row[j] };
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::TopkGate {
                probs,
                keep,
                renormalize,
            },
            &[probs],
        ))
    }

    /// Propagates gradients from a scalar `loss` to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; build a new tape per forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(id, &g)?;
            self.nodes[id].grad = Some(g);
            for (var, delta) in contributions {
                self.accumulate(var, delta);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, delta: Vec<T>) {
        let node = &mut self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a = *a + b),
            None => node.grad = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, id: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    out.push((*a, matmul_grad_a(g, self.value(*b).data(), m, k, n)));
                }
                if self.wants(*b) {
                    out.push((*b, matmul_grad_b(self.value(*a).data(), g, m, k, n)));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(bs * m * k);
                    for i in 0..bs {
                        ga.extend(matmul_grad_a(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = Vec::with_capacity(bs * k * n);
                    for i in 0..bs {
                        gb.extend(matmul_grad_b(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![T::zero(); n];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + gv;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let n = bd.len();
                if self.wants(*a) {
                    out.push((*a, g.iter().enumerate().map(|(i, &gv)| gv * bd[i % n]).collect()));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); n];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] = gb[i % n] + gv * ad[i];
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    out.push((*x, g.iter().map(|&v| v * *c).collect()));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    out.push((
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                            .collect(),
                    ));
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    out.push((*x, g.iter().zip(xd).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect()));
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let map = permute_index(self.shape(*x), perm);
                    let mut gx = vec![T::zero(); g.len()];
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] = g[o];
                    }
                    out.push((*x, gx));
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let cols = self.shape(*table)[1];
                    let mut gt = vec![T::zero(); self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] = gt[id * cols + c] + g[r * cols + c];
                        }
                    }
                    out.push((*table, gt));
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let xd = self.value(*x).data();
                let w = self.value(*weight).data();
                let d = w.len();
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); xd.len()];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = (0..d).map(|j| gr[j] * w[j] * row[j]).sum();
                        let coef = inv * inv * inv * dot / T::lit(d as f64);
                        for j in 0..d {
                            gx[r * d + j] = inv * gr[j] * w[j] - coef * row[j];
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gw[j] = gw[j] + g[r * d + j] * xd[r * d + j] * inv;
                        }
                    }
                    out.push((*weight, gw));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                denom,
            } => {
                if self.wants(*logits) {
                    let vocab = *self.shape(*logits).last().unwrap();
                    let mut gl = vec![T::zero(); probs.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if m == T::zero() {
                            continue;
                        }
                        let w = g[0] * m / *denom;
                        for j in 0..vocab {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * vocab + j] = w * (probs[r * vocab + j] - onehot);
                        }
                    }
                    out.push((*logits, gl));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    out.push((*x, vec![g[0]; self.value(*x).numel()]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    out.push((*x, vec![g[0] / T::lit(n as f64); n]));
                }
            }
            Op::MeanRows(x) => {
                if self.wants(*x) {
                    let shape = self.shape(*x);
                    let (rows, cols) = (shape[0], shape[1]);
                    let inv = T::lit(1.0 / rows as f64);
                    out.push((*x, (0..rows * cols).map(|i| g[i % cols] * inv).collect()));
                }
            }
            Op::SoftMerge { probs, bank, denom } => {
                let (rows, n) = (self.shape(*probs)[0], self.shape(*probs)[1]);
                let d = self.shape(*bank)[1];
                let p = self.value(*probs).data();
                let l = self.value(*bank).data();
                let merged = node.value.data();
                if self.wants(*probs) {
                    let mut gp = vec![T::zero(); rows * n];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let mr = &merged[r * d..(r + 1) * d];
                        for e in 0..n {
                            let le = &l[e * d..(e + 1) * d];
                            let s: T = (0..d).map(|j| gr[j] * (le[j] - mr[j])).sum();
                            gp[r * n + e] = s / denom[r];
                        }
                    }
                    out.push((*probs, gp));
                }
                if self.wants(*bank) {
                    let mut gl = vec![T::zero(); n * d];
                    for r in 0..rows {
                        for e in 0..n {
                            let w = p[r * n + e] / denom[r];
                            if w == T::zero() {
                                continue;
                            }
                            for j in 0..d {
                                gl[e * d + j] = gl[e * d + j] + w * g[r * d + j];
                            }
                        }
                    }
                    out.push((*bank, gl));
                }
            }
            Op::TopkGate {
                probs,
                keep,
                renormalize,
            } => {
                if self.wants(*probs) {
                    let n = self.shape(*probs)[1];
                    let w = node.value.data();
                    let p = self.value(*probs).data();
                    let mut gp = vec![T::zero(); p.len()];
                    for r in 0..p.len() / n {
                        let idx = r * n..(r + 1) * n;
                        if *renormalize {
                            let z: T = idx.clone().filter(|&i| keep[i]).map(|i| p[i]).sum();
                            let dot: T = idx.clone().filter(|&i| keep[i]).map(|i| g[i] * w[i]).sum();
                            for i in idx.filter(|&i| keep[i]) {
                                gp[i] = (g[i] - dot) / z;
                            }
                        } else {
                            for i in idx.filter(|&i| keep[i]) {
                                gp[i] = g[i];
                            }
                        }
                    }
                    out.push((*probs, gp));
                }
            }
        }
        Ok(out)
    }
}

/// Indices of the `k` largest values, ties resolved toward the lower index.
pub fn topk_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    order
}

fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut ga = vec![T::zero(); m * k];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            ga[i * k + p] = gr.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    }
    ga
}

fn matmul_grad_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let row = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in row.iter_mut().zip(gr) {
                *o = *o + av * gv;
            }
        }
    }
    gb
}
