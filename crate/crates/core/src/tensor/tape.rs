use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::Broadcast;
use super::{split_axis, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    GroupedMatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Embedding,
    IndexSelect,
    ScatterAdd,
    Softmax,
    LogSumExp,
    Silu,
    Sigmoid,
    Rsqrt,
    Square,
    Mean,
    Sum,
    Concat,
    Slice,
    Transpose,
    Reshape,
    Dropout,
    CrossEntropy,
    MaskedFill,
    Rope,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Leaf => "leaf",
            Self::MatMul => "matmul",
            Self::GroupedMatMul => "grouped_matmul",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Div => "div",
            Self::Scale => "scale",
            Self::AddScalar => "add_scalar",
            Self::Embedding => "embedding",
            Self::IndexSelect => "index_select",
            Self::ScatterAdd => "scatter_add",
            Self::Softmax => "softmax",
            Self::LogSumExp => "logsumexp",
            Self::Silu => "silu",
            Self::Sigmoid => "sigmoid",
            Self::Rsqrt => "rsqrt",
            Self::Square => "square",
            Self::Mean => "mean",
            Self::Sum => "sum",
            Self::Concat => "concat",
            Self::Slice => "slice",
            Self::Transpose => "transpose",
            Self::Reshape => "reshape",
            Self::Dropout => "dropout",
            Self::CrossEntropy => "cross_entropy",
            Self::MaskedFill => "masked_fill",
            Self::Rope => "rope",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Sigmoid,
    Rsqrt,
    Square,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    GroupedMatMul { x: Var, w: Var, offsets: Vec<usize>, k: usize, n: usize },
    Binary { kind: Binary, a: Var, b: Var, plan: Broadcast, table: Vec<usize> },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    IndexSelect { x: Var, axis: usize, idx: Vec<usize> },
    ScatterAdd { src: Var, axis: usize, idx: Vec<usize> },
    Softmax { x: Var },
    LogSumExp { x: Var },
    Unary { kind: Unary, x: Var },
    Reduce { x: Var, axis: usize, mean: bool },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose { x: Var, a1: usize, a2: usize },
    Reshape { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    Rope { x: Var, cos: Vec<T>, sin: Vec<T>, seq: usize, head_dim: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a forward computation so it can be differentiated once.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mixes a list of integers into one well-spread 64-bit rng key (splitmix64).
pub fn rng_key(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false, check_finite: false }
    }

    /// Makes every op fail on non-finite outputs. Debug aid; off by default.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, kind: OpKind, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", kind.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a @ b`. A 2-D `b` multiplies the flattened rows of `a`; an N-D `b`
    /// requires matching leading (batch) dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.is_empty() || sb.len() < 2 {
            return Err(bad());
        }
        let k = *sa.last().unwrap();
        let (batch, m, n, b_batched, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(bad());
            }
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            (1, m, sb[1], false, out)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k {
                return Err(bad());
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let m = sa[sa.len() - 2];
            let n = sb[sb.len() - 1];
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(n);
            (batch, m, n, true, out)
        };
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let bb = if b_batched { &bv[bi * k * n..(bi + 1) * k * n] } else { bv };
                let cb = &mut out[bi * m * n..(bi + 1) * m * n];
                T::gemm(m, k, n, ab, (k as isize, 1), bb, (n as isize, 1), T::ZERO, cb, (n as isize, 1));
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(OpKind::MatMul, value, Op::MatMul { a, b, batch, m, k, n, b_batched }, &[a, b])
    }

    /// Segment-wise matmul against an expert-stacked weight: rows
    /// `offsets[e]..offsets[e+1]` of `x` are multiplied by `w[e]`.
    pub fn grouped_matmul(&mut self, x: Var, w: Var, offsets: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let bad = |d: String| Error::shape("grouped_matmul", d);
        if sx.len() != 2 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(bad(format!("{sx:?} x {sw:?}")));
        }
        let (m, k, e, n) = (sx[0], sx[1], sw[0], sw[2]);
        if offsets.len() != e + 1 || offsets[0] != 0 || offsets[e] != m || offsets.windows(2).any(|p| p[0] > p[1]) {
            return Err(bad(format!("offsets {offsets:?} do not partition {m} rows into {e} groups")));
        }
        let mut out = vec![T::ZERO; m * n];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for g in 0..e {
                let (r0, r1) = (offsets[g], offsets[g + 1]);
                if r0 == r1 {
                    continue;
                }
                T::gemm(
                    r1 - r0,
                    k,
                    n,
                    &xv[r0 * k..r1 * k],
                    (k as isize, 1),
                    &wv[g * k * n..(g + 1) * k * n],
                    (n as isize, 1),
                    T::ZERO,
                    &mut out[r0 * n..r1 * n],
                    (n as isize, 1),
                );
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        self.push(OpKind::GroupedMatMul, value, Op::GroupedMatMul { x, w, offsets: offsets.to_vec(), k, n }, &[x, w])
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op_kind = match kind {
            Binary::Add => OpKind::Add,
            Binary::Sub => OpKind::Sub,
            Binary::Mul => OpKind::Mul,
            Binary::Div => OpKind::Div,
        };
        let plan = Broadcast::plan(op_kind.name(), self.shape(a), self.shape(b))?;
        let n = self.value(a).numel();
        let table = match plan {
            Broadcast::General { .. } => plan.indices(n),
            _ => Vec::new(),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (av[i], bv[bcast(&plan, &table, i)]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        self.push(op_kind, value, Op::Binary { kind, a, b, plan, table }, &[a, b])
    }

    /// Elementwise `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.map_value(x, |v| v * c);
        self.push(OpKind::Scale, value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let value = self.map_value(x, |v| v + c);
        self.push(OpKind::AddScalar, value, Op::AddScalar { x }, &[x])
    }

    fn map_value(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(x);
        Tensor { shape: src.shape().to_vec(), data: src.data().iter().map(|&v| f(v)).collect() }
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let (op_kind, value) = match kind {
            Unary::Silu => (OpKind::Silu, self.map_value(x, |v| v * sigmoid(v))),
            Unary::Sigmoid => (OpKind::Sigmoid, self.map_value(x, sigmoid)),
            Unary::Rsqrt => (OpKind::Rsqrt, self.map_value(x, |v| T::ONE / v.sqrt())),
            Unary::Square => (OpKind::Square, self.map_value(x, |v| v * v)),
        };
        self.push(op_kind, value, Op::Unary { kind, x }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn rsqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Rsqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    // ---------------------------------------------------------------- gather / scatter

    /// Rows of `table` (shape `[vocab, dim]`) selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {st:?}")));
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("token id {bad} out of range for vocab {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(&[ids.len(), dim], out)?;
        self.push(OpKind::Embedding, value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Selects entries `idx` along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape("index_select", format!("axis {axis} out of range for {sx:?}")));
        }
        let (outer, extent, inner) = split_axis(&sx, axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= extent) {
            return Err(Error::shape("index_select", format!("index {bad} out of range {extent} on axis {axis} of {sx:?}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * extent + i) * inner;
                out.extend_from_slice(&xv[base..base + inner]);
            }
        }
        let mut shape = sx;
        shape[axis] = idx.len();
        let value = Tensor::new(&shape, out)?;
        self.push(OpKind::IndexSelect, value, Op::IndexSelect { x, axis, idx: idx.to_vec() }, &[x])
    }

    /// Sums entry `i` of `src` along `axis` into slot `idx[i]` of a zero tensor
    /// whose `axis` extent is `size`.
    pub fn scatter_add(&mut self, src: Var, axis: usize, idx: &[usize], size: usize) -> Result<Var> {
        let ss = self.shape(src).to_vec();
        if axis >= ss.len() || ss[axis] != idx.len() {
            return Err(Error::shape("scatter_add", format!("{} indices for axis {axis} of {ss:?}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= size) {
            return Err(Error::shape("scatter_add", format!("index {bad} out of range {size}")));
        }
        let (outer, extent, inner) = split_axis(&ss, axis);
        let sv = self.value(src).data();
        let mut out = vec![T::ZERO; outer * size * inner];
        for o in 0..outer {
            for (i, &dst) in idx.iter().enumerate() {
                let s = (o * extent + i) * inner;
                let d = (o * size + dst) * inner;
                for j in 0..inner {
                    out[d + j] += sv[s + j];
                }
            }
        }
        let mut shape = ss;
        shape[axis] = size;
        let value = Tensor::new(&shape, out)?;
        self.push(OpKind::ScatterAdd, value, Op::ScatterAdd { src, axis, idx: idx.to_vec() }, &[src])
    }

    // ---------------------------------------------------------------- reductions

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(&sx, out)?;
        self.push(OpKind::Softmax, value, Op::Softmax { x }, &[x])
    }

    /// Log-sum-exp over the last axis; the axis is removed.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::shape("logsumexp", "scalar input"))?;
        let out: Vec<T> = self.value(x).data().chunks(n.max(1)).map(logsumexp_row).collect();
        let mut shape = sx[..sx.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(&shape, out)?;
        self.push(OpKind::LogSumExp, value, Op::LogSumExp { x }, &[x])
    }

    fn reduce(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let kind = if mean { OpKind::Mean } else { OpKind::Sum };
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape(kind.name(), format!("axis {axis} out of range for {sx:?}")));
        }
        let (outer, extent, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; outer * inner];
        // leading-axis-major sequential accumulation
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        if mean {
            let inv = T::ONE / T::from_f64(extent as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = sx;
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push(kind, value, Op::Reduce { x, axis, mean }, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0, false)
    }

    // ---------------------------------------------------------------- layout

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return Err(Error::shape("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let ext = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(OpKind::Concat, value, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start > end || end > sx[axis] {
            return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {sx:?}")));
        }
        let (outer, extent, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * extent + start) * inner..(o * extent + end) * inner]);
        }
        let mut shape = sx;
        shape[axis] = end - start;
        let value = Tensor::new(&shape, out)?;
        self.push(OpKind::Slice, value, Op::Slice { x, axis, start }, &[x])
    }

    /// Swaps two axes (materialized copy).
    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if a1 >= sx.len() || a2 >= sx.len() {
            return Err(Error::shape("transpose", format!("axes ({a1}, {a2}) out of range for {sx:?}")));
        }
        let (shape, out) = swap_axes(self.value(x).data(), &sx, a1, a2);
        let value = Tensor::new(&shape, out)?;
        self.push(OpKind::Transpose, value, Op::Transpose { x, a1, a2 }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(OpKind::Reshape, value, Op::Reshape { x }, &[x])
    }

    // ---------------------------------------------------------------- model-specific

    /// Inverted dropout. Identity (no node recorded) when not training or `p == 0`.
    /// The mask is drawn from a counter-based stream seeded by `key`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, key: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep }).collect();
        let xv = self.value(x).data();
        let out = xv.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x), out)?;
        self.push(OpKind::Dropout, value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean cross-entropy of `logits` (`[N, V]`) against `targets`; rows whose
    /// target equals `ignore_index` are excluded from both sum and count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape("cross_entropy", format!("logits {sl:?} vs {} targets", targets.len())));
        }
        let vocab = sl[1];
        let targets: Vec<Option<usize>> =
            targets.iter().map(|&t| if Some(t) == ignore_index { None } else { Some(t) }).collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::shape("cross_entropy", format!("target {bad} out of range for {vocab} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "no non-ignored targets"));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            if let Some(t) = t {
                let lse = logsumexp_row(&lv[r * vocab..(r + 1) * vocab]);
                total += (lse - lv[r * vocab + t]).to_f64();
            }
            softmax_in_place(row);
        }
        let value = Tensor::scalar(T::from_f64(total / count as f64));
        self.push(OpKind::CrossEntropy, value, Op::CrossEntropy { logits, targets, probs, count }, &[logits])
    }

    /// Replaces entries with `value` where `mask` is set. `mask` covers the
    /// trailing dims of `x` and repeats over the leading ones.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let n = self.value(x).numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(Error::shape("masked_fill", format!("mask of {} does not tile {:?}", mask.len(), self.shape(x))));
        }
        let fill = T::from_f64(value);
        let m = mask.len();
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| if mask[i % m] { fill } else { v }).collect();
        let value = Tensor::new(self.shape(x), out)?;
        self.push(OpKind::MaskedFill, value, Op::MaskedFill { x, mask: mask.to_vec() }, &[x])
    }

    /// Rotary embedding on `x` of shape `[..., seq, head_dim]`: pair
    /// `(x[2i], x[2i+1])` at position `p` is rotated by `p * base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape("rope", format!("need [..., seq, head_dim], got {sx:?}")));
        }
        let head_dim = sx[sx.len() - 1];
        let seq = sx[sx.len() - 2];
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head_dim, got {head_dim}")));
        }
        if positions.len() != seq {
            return Err(Error::shape("rope", format!("{} positions for sequence length {seq}", positions.len())));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for &p in positions {
            for i in 0..half {
                let angle = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        let mut out = self.value(x).data().to_vec();
        rotate(&mut out, &cos, &sin, seq, head_dim, false);
        let value = Tensor::new(&sx, out)?;
        self.push(OpKind::Rope, value, Op::Rope { x, cos, sin, seq, head_dim }, &[x])
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
    /// A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd("backward already ran on this tape".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Autograd(format!("loss must be scalar, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Autograd("loss does not depend on any tensor that requires grad".into()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul { a, b, batch, m, k, n, b_batched } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(ga) = grad_buf(&mut grads, nodes, *a) {
                        for bi in 0..batch {
                            let bb = if *b_batched { &bv[bi * k * n..(bi + 1) * k * n] } else { bv };
                            // dA = dC @ B^T
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                bb,
                                (1, n as isize),
                                T::ONE,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                (k as isize, 1),
                            );
                        }
                    }
                    if let Some(gb) = grad_buf(&mut grads, nodes, *b) {
                        for bi in 0..batch {
                            let gbb = if *b_batched { &mut gb[bi * k * n..(bi + 1) * k * n] } else { &mut gb[..] };
                            // dB = A^T @ dC
                            T::gemm(
                                k,
                                m,
                                n,
                                &av[bi * m * k..(bi + 1) * m * k],
                                (1, k as isize),
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n as isize, 1),
                                T::ONE,
                                gbb,
                                (n as isize, 1),
                            );
                        }
                    }
                }
                Op::GroupedMatMul { x, w, offsets, k, n } => {
                    let (k, n) = (*k, *n);
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for (e, seg) in offsets.windows(2).enumerate() {
                            let (r0, r1) = (seg[0], seg[1]);
                            if r0 == r1 {
                                continue;
                            }
                            T::gemm(
                                r1 - r0,
                                n,
                                k,
                                &g[r0 * n..r1 * n],
                                (n as isize, 1),
                                &wv[e * k * n..(e + 1) * k * n],
                                (1, n as isize),
                                T::ONE,
                                &mut gx[r0 * k..r1 * k],
                                (k as isize, 1),
                            );
                        }
                    }
                    if let Some(gw) = grad_buf(&mut grads, nodes, *w) {
                        for (e, seg) in offsets.windows(2).enumerate() {
                            let (r0, r1) = (seg[0], seg[1]);
                            if r0 == r1 {
                                continue;
                            }
                            T::gemm(
                                k,
                                r1 - r0,
                                n,
                                &xv[r0 * k..r1 * k],
                                (1, k as isize),
                                &g[r0 * n..r1 * n],
                                (n as isize, 1),
                                T::ONE,
                                &mut gw[e * k * n..(e + 1) * k * n],
                                (n as isize, 1),
                            );
                        }
                    }
                }
                Op::Binary { kind, a, b, plan, table } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(ga) = grad_buf(&mut grads, nodes, *a) {
                        for (i, gi) in g.iter().enumerate() {
                            let y = bv[bcast(plan, table, i)];
                            ga[i] += match kind {
                                Binary::Add | Binary::Sub => *gi,
                                Binary::Mul => *gi * y,
                                Binary::Div => *gi / y,
                            };
                        }
                    }
                    if let Some(gb) = grad_buf(&mut grads, nodes, *b) {
                        for (i, gi) in g.iter().enumerate() {
                            let j = bcast(plan, table, i);
                            gb[j] += match kind {
                                Binary::Add => *gi,
                                Binary::Sub => -*gi,
                                Binary::Mul => *gi * av[i],
                                Binary::Div => -*gi * av[i] / (bv[j] * bv[j]),
                            };
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, &s)| *d += s * *c);
                    }
                }
                Op::AddScalar { x } | Op::Reshape { x } => {
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    }
                }
                Op::Embedding { table, ids } => {
                    if let Some(gt) = grad_buf(&mut grads, nodes, *table) {
                        let dim = nodes[table.0].value.shape()[1];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..dim {
                                gt[id * dim + j] += g[r * dim + j];
                            }
                        }
                    }
                }
                Op::IndexSelect { x, axis, idx } => {
                    let sx = nodes[x.0].value.shape();
                    let (outer, extent, inner) = split_axis(sx, *axis);
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            for (r, &src) in idx.iter().enumerate() {
                                let d = (o * extent + src) * inner;
                                let s = (o * idx.len() + r) * inner;
                                for j in 0..inner {
                                    gx[d + j] += g[s + j];
                                }
                            }
                        }
                    }
                }
                Op::ScatterAdd { src, axis, idx } => {
                    let ss = nodes[src.0].value.shape();
                    let (outer, extent, inner) = split_axis(ss, *axis);
                    let size = node.value.shape()[*axis];
                    if let Some(gs) = grad_buf(&mut grads, nodes, *src) {
                        for o in 0..outer {
                            for (r, &dst) in idx.iter().enumerate() {
                                let d = (o * extent + r) * inner;
                                let s = (o * size + dst) * inner;
                                for j in 0..inner {
                                    gs[d + j] += g[s + j];
                                }
                            }
                        }
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSumExp { x } => {
                    let xv = nodes[x.0].value.data();
                    let n = *nodes[x.0].value.shape().last().unwrap();
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for (r, (xr, dr)) in xv.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                            let mut p = xr.to_vec();
                            softmax_in_place(&mut p);
                            for j in 0..n {
                                dr[j] += g[r] * p[j];
                            }
                        }
                    }
                }
                Op::Unary { kind, x } => {
                    let xv = nodes[x.0].value.data();
                    let yv = node.value.data();
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        let half = T::from_f64(0.5);
                        let two = T::from_f64(2.0);
                        for i in 0..g.len() {
                            let d = match kind {
                                Unary::Silu => {
                                    let s = sigmoid(xv[i]);
                                    s * (T::ONE + xv[i] * (T::ONE - s))
                                }
                                Unary::Sigmoid => yv[i] * (T::ONE - yv[i]),
                                Unary::Rsqrt => -half * yv[i] * yv[i] * yv[i],
                                Unary::Square => two * xv[i],
                            };
                            gx[i] += g[i] * d;
                        }
                    }
                }
                Op::Reduce { x, axis, mean } => {
                    let sx = nodes[x.0].value.shape();
                    let (outer, extent, inner) = split_axis(sx, *axis);
                    let scale = if *mean { T::ONE / T::from_f64(extent as f64) } else { T::ONE };
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            for e in 0..extent {
                                let base = (o * extent + e) * inner;
                                for i in 0..inner {
                                    gx[base + i] += g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                Op::Concat { xs, axis } => {
                    let shape = node.value.shape();
                    let (outer, total, inner) = split_axis(shape, *axis);
                    let mut start = 0;
                    for &v in xs {
                        let ext = nodes[v.0].value.shape()[*axis];
                        if let Some(gv) = grad_buf(&mut grads, nodes, v) {
                            for o in 0..outer {
                                let s = (o * total + start) * inner;
                                let d = o * ext * inner;
                                for j in 0..ext * inner {
                                    gv[d + j] += g[s + j];
                                }
                            }
                        }
                        start += ext;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let sx = nodes[x.0].value.shape();
                    let (outer, extent, inner) = split_axis(sx, *axis);
                    let len = node.value.shape()[*axis];
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            let d = (o * extent + start) * inner;
                            let s = o * len * inner;
                            for j in 0..len * inner {
                                gx[d + j] += g[s + j];
                            }
                        }
                    }
                }
                Op::Transpose { x, a1, a2 } => {
                    let (_, back) = swap_axes(&g, node.value.shape(), *a1, *a2);
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            gx[i] += g[i] * mask[i];
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let vocab = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / T::from_f64(*count as f64);
                    if let Some(gl) = grad_buf(&mut grads, nodes, *logits) {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            for j in 0..vocab {
                                gl[r * vocab + j] += scale * probs[r * vocab + j];
                            }
                            gl[r * vocab + t] -= scale;
                        }
                    }
                }
                Op::MaskedFill { x, mask } => {
                    let m = mask.len();
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        for i in 0..g.len() {
                            if !mask[i % m] {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Rope { x, cos, sin, seq, head_dim } => {
                    let mut back = g.clone();
                    rotate(&mut back, cos, sin, *seq, *head_dim, true);
                    if let Some(gx) = grad_buf(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor { shape, data: g });
        }
        Ok(())
    }
}

fn grad_buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; node.value.numel()]))
}

#[inline]
fn bcast(plan: &Broadcast, table: &[usize], i: usize) -> usize {
    match plan {
        Broadcast::Same => i,
        Broadcast::Inner(len) => i % len,
        Broadcast::Outer(inner) => i / inner,
        Broadcast::General { .. } => table[i],
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

pub(crate) fn logsumexp_row<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::ONE / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn rotate<T: Scalar>(data: &mut [T], cos: &[T], sin: &[T], seq: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for (r, row) in data.chunks_mut(head_dim).enumerate() {
        let t = r % seq;
        for i in 0..half {
            let (c, s) = (cos[t * half + i], if inverse { -sin[t * half + i] } else { sin[t * half + i] });
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
}

fn swap_axes<T: Scalar>(data: &[T], shape: &[usize], a1: usize, a2: usize) -> (Vec<usize>, Vec<T>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a1, a2);
    if a1 == a2 {
        return (out_shape, data.to_vec());
    }
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut strides = in_strides.clone();
    strides.swap(a1, a2);
    let inner_dim = nd - 1;
    let inner_len = out_shape[inner_dim];
    let inner_stride = strides[inner_dim];
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; nd];
    let rows = if inner_len == 0 { 0 } else { data.len() / inner_len };
    for _ in 0..rows {
        let base: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        for d in (0..inner_dim).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    (out_shape, out)
}
