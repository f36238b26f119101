//! Dense tensors and a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is a plain row-major buffer with a shape. Differentiable
//! computation happens on a [`Tape`]: values are registered as leaves or
//! constants, every operation appends a node whose parents precede it, and
//! [`Tape::backward`] walks the nodes once in reverse to produce
//! [`Gradients`]. The tape is consumed by `backward`.
//!
//! Everything runs in `f32`. The element type is generic only so that the
//! finite-difference side of [`grad_check`] can evaluate the same function
//! in `f64`.
//!
//! Broadcasting is limited to one rule: in `add` and `mul` the right operand's
//! shape may be a suffix of the left operand's shape, in which case it is
//! repeated over the leading dimensions.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Target value excluded from the cross-entropy mean.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Floating-point element of a [`Tensor`].
pub trait Element: Float + Debug + Default + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Element for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: positive shape")
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("from_fn: positive shape")
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[E]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Contract(format!(
                "expected a 2-D tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[E] {
        let cols = *self.shape.last().expect("row() on scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::of(v.f64())).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    Sum(usize),
    Silu(usize),
    SoftmaxRows(usize),
    CausalMask(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        count: usize,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<E>,
    },
    Rope {
        x: usize,
        cos: Vec<E>,
        sin: Vec<E>,
        head_dim: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
}

impl<E> Op<E> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Const => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Silu(x)
            | Op::SoftmaxRows(x)
            | Op::CausalMask(x, _) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Rope { x, .. } | Op::SliceCols { x, .. } | Op::SliceRows { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Ordered record of operations; node ids are assigned by a monotone counter.
#[derive(Debug)]
pub struct Tape<E = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a detached input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf | Op::Const)
                || !value.data.iter().any(|x| x.is_nan())
                || op
                    .parents()
                    .iter()
                    .any(|&p| !self.nodes[p].value.is_finite()),
            "NaN produced from finite inputs by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let out = transpose(self.value(a).data(), m, n);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Result<Tensor<E>> {
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let out = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % n]))
            .collect();
        Tensor::new(av.shape(), out)
    }

    /// Elementwise sum; `b` may broadcast over `a`'s leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let t = self.zip_broadcast(a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    /// Elementwise product; `b` may broadcast over `a`'s leading dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let t = self.zip_broadcast(a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape(), av.data().iter().map(|&x| x * c).collect())?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Scale(a.0, c), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(E::of(s)), Op::Sum(a.0), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape(), av.data().iter().map(|&x| silu(x)).collect())?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Silu(a.0), rg))
    }

    /// Row-wise softmax with max subtraction. Entries equal to `-inf` map to 0.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let x = self.value(a).data();
        let mut out = vec![E::zero(); m * n];
        for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_into(row, orow);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(a.0), rg))
    }

    /// Sets entry (i, j) to `-inf` whenever `j > i + offset`.
    pub fn causal_mask(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in (i + offset + 1).min(n)..n {
                out[i * n + j] = E::neg_infinity();
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::CausalMask(a.0, offset), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` [t, V]. Targets equal to [`IGNORE_INDEX`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2(logits)?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, v], &[targets.len()]));
        }
        let x = self.value(logits);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, &target) in targets.iter().enumerate() {
            if target == IGNORE_INDEX {
                continue;
            }
            if target >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: target,
                    bound: v,
                });
            }
            let row = x.row(i);
            total += log_sum_exp(row) - row[target].f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract(
                "cross_entropy: every target is ignored".into(),
            ));
        }
        let loss = E::of(total / count as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Per row: `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(gain) != [n] {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![E::zero(); m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for (row, orow) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let ms = row.iter().map(|a| a.f64() * a.f64()).sum::<f64>() / n as f64;
            let r = E::of(1.0 / (ms + eps).sqrt());
            inv_rms.push(r);
            for j in 0..n {
                orow[j] = row[j] * r * g[j];
            }
        }
        let rg = self.needs(&[x, gain]);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
            rg,
        ))
    }

    /// Rotates interleaved pairs `(x[2i], x[2i+1])` of every head. `cos` and
    /// `sin` hold `rows * head_dim / 2` values, one row per leading index.
    pub fn rope(&mut self, x: Var, cos: Vec<E>, sin: Vec<E>, head_dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::Contract("rope on a scalar".into()))?;
        let xv = self.value(x).data();
        let width = xv.len() / rows;
        let half = head_dim / 2;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || !width.is_multiple_of(head_dim) {
            return Err(Error::shape("rope", &shape, &[head_dim]));
        }
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(Error::shape("rope", &shape, &[cos.len()]));
        }
        let mut out = vec![E::zero(); xv.len()];
        for r in 0..rows {
            let c = &cos[r * half..(r + 1) * half];
            let s = &sin[r * half..(r + 1) * half];
            for (hin, hout) in xv[r * width..(r + 1) * width]
                .chunks_exact(head_dim)
                .zip(out[r * width..(r + 1) * width].chunks_exact_mut(head_dim))
            {
                for i in 0..half {
                    let (a, b) = (hin[2 * i], hin[2 * i + 1]);
                    hout[2 * i] = a * c[i] - b * s[i];
                    hout[2 * i + 1] = a * s[i] + b * c[i];
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Rope {
                x: x.0,
                cos,
                sin,
                head_dim,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` [V, H]; the gradient scatter-adds back.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding of zero ids".into()));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * h..(id + 1) * h]);
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), h], out)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + width > n || width == 0 {
            return Err(Error::Range(format!(
                "column slice {start}..{} of width {n}",
                start + width
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * width);
        for row in xv.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[m, width], out)?,
            Op::SliceCols { x: x.0, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > m || len == 0 {
            return Err(Error::Range(format!(
                "row slice {start}..{} of {m}",
                start + len
            )));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[len, n], out)?,
            Op::SliceRows { x: x.0, start },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, n) = self.dims2(first)?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            out.extend_from_slice(self.value(p).data());
            m += r;
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![E::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut acc = |pid: usize, f: &dyn Fn(&mut [E])| {
                if !self.nodes[pid].requires_grad {
                    return;
                }
                let slot =
                    grads[pid].get_or_insert_with(|| vec![E::zero(); self.nodes[pid].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[*a].value.dims2()?;
                    let n = self.nodes[*b].value.shape()[1];
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    acc(*a, &|s| add_into(s, &gemm_nt(&g, bv, m, n, k)));
                    acc(*b, &|s| add_into(s, &gemm_tn(av, &g, m, k, n)));
                }
                Op::Transpose(a) => {
                    let (m, n) = self.nodes[*a].value.dims2()?;
                    acc(*a, &|s| add_into(s, &transpose(&g, n, m)));
                }
                Op::Reshape(a) => acc(*a, &|s| add_into(s, &g)),
                Op::Add(a, b) => {
                    acc(*a, &|s| add_into(s, &g));
                    acc(*b, &|s| {
                        let n = s.len();
                        for (i, &gi) in g.iter().enumerate() {
                            s[i % n] = s[i % n] + gi;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    let n = bv.len();
                    acc(*a, &|s| {
                        for (i, &gi) in g.iter().enumerate() {
                            s[i] = s[i] + gi * bv[i % n];
                        }
                    });
                    acc(*b, &|s| {
                        for (i, &gi) in g.iter().enumerate() {
                            s[i % n] = s[i % n] + gi * av[i];
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &|s| {
                    for (si, &gi) in s.iter_mut().zip(&g) {
                        *si = *si + gi * *c;
                    }
                }),
                Op::Sum(a) => acc(*a, &|s| {
                    for si in s.iter_mut() {
                        *si = *si + g[0];
                    }
                }),
                Op::Silu(a) => {
                    let xv = self.nodes[*a].value.data();
                    acc(*a, &|s| {
                        for ((si, &gi), &x) in s.iter_mut().zip(&g).zip(xv) {
                            let sig = sigmoid(x);
                            *si = *si + gi * (sig + x * sig * (E::one() - sig));
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let n = node.value.shape()[1];
                    acc(*a, &|s| {
                        for ((srow, grow), yrow) in s
                            .chunks_exact_mut(n)
                            .zip(g.chunks_exact(n))
                            .zip(y.chunks_exact(n))
                        {
                            let dot: E = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                srow[j] = srow[j] + yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
                Op::CausalMask(a, offset) => {
                    let n = node.value.shape()[1];
                    acc(*a, &|s| {
                        for (i, (srow, grow)) in
                            s.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate()
                        {
                            let keep = (i + offset + 1).min(n);
                            add_into(&mut srow[..keep], &grow[..keep]);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    count,
                } => {
                    let lv = &self.nodes[*logits].value;
                    let v = lv.shape()[1];
                    let scale = g[0] / E::of(*count as f64);
                    acc(*logits, &|s| {
                        let mut p = vec![E::zero(); v];
                        for (i, &target) in targets.iter().enumerate() {
                            if target == IGNORE_INDEX {
                                continue;
                            }
                            softmax_into(lv.row(i), &mut p);
                            p[target] = p[target] - E::one();
                            for (sj, &pj) in s[i * v..(i + 1) * v].iter_mut().zip(&p) {
                                *sj = *sj + pj * scale;
                            }
                        }
                    });
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = &self.nodes[*x].value;
                    let n = xv.shape()[1];
                    let gv = self.nodes[*gain].value.data();
                    acc(*x, &|s| {
                        for (i, &r) in inv_rms.iter().enumerate() {
                            let row = xv.row(i);
                            let grow = &g[i * n..(i + 1) * n];
                            let dot: E = (0..n).map(|j| grow[j] * gv[j] * row[j]).sum();
                            let c = r * r * r * dot / E::of(n as f64);
                            for j in 0..n {
                                s[i * n + j] = s[i * n + j] + r * gv[j] * grow[j] - c * row[j];
                            }
                        }
                    });
                    acc(*gain, &|s| {
                        for (i, &r) in inv_rms.iter().enumerate() {
                            let row = xv.row(i);
                            for j in 0..n {
                                s[j] = s[j] + g[i * n + j] * row[j] * r;
                            }
                        }
                    });
                }
                Op::Rope {
                    x,
                    cos,
                    sin,
                    head_dim,
                } => {
                    let half = head_dim / 2;
                    let rows = node.value.shape()[0];
                    let width = g.len() / rows;
                    acc(*x, &|s| {
                        for r in 0..rows {
                            let c = &cos[r * half..(r + 1) * half];
                            let sn = &sin[r * half..(r + 1) * half];
                            for (gh, sh) in g[r * width..(r + 1) * width]
                                .chunks_exact(*head_dim)
                                .zip(s[r * width..(r + 1) * width].chunks_exact_mut(*head_dim))
                            {
                                for i in 0..half {
                                    let (g0, g1) = (gh[2 * i], gh[2 * i + 1]);
                                    sh[2 * i] = sh[2 * i] + g0 * c[i] + g1 * sn[i];
                                    sh[2 * i + 1] = sh[2 * i + 1] - g0 * sn[i] + g1 * c[i];
                                }
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let h = self.nodes[*table].value.shape()[1];
                    acc(*table, &|s| {
                        for (i, &id) in ids.iter().enumerate() {
                            add_into(&mut s[id * h..(id + 1) * h], &g[i * h..(i + 1) * h]);
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let n = self.nodes[*x].value.shape()[1];
                    let w = node.value.shape()[1];
                    acc(*x, &|s| {
                        for (i, grow) in g.chunks_exact(w).enumerate() {
                            add_into(&mut s[i * n + start..i * n + start + w], grow);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.shape()[1];
                        acc(p, &|s| {
                            for (i, srow) in s.chunks_exact_mut(w).enumerate() {
                                add_into(srow, &g[i * n + offset..i * n + offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = node.value.shape()[1];
                    acc(*x, &|s| {
                        add_into(&mut s[start * n..start * n + g.len()], &g)
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p].value.len();
                        acc(p, &|s| add_into(s, &g[offset..offset + len]));
                        offset += len;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<E = f32> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    /// The gradient of `v`, or `None` if no differentiable path reached it.
    pub fn get(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<E>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// The gradient of `v`, zeros when none was recorded.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<E> {
        self.get(v)
            .map_or_else(|| vec![E::zero(); len], <[E]>::to_vec)
    }
}

/// A scalar-valued function of one tensor, written once for any element type.
pub trait ScalarFn {
    fn eval<E: Element>(&self, tape: &mut Tape<E>, x: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Central-difference step for f32 evaluation ([`grad_check_f32`]). Smaller
/// steps drown in rounding error.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Central-difference step for the f64 evaluation in [`grad_check`]. Small
/// enough that truncation error stays well under the f32 analytic noise on
/// sharply curved losses.
pub const GRAD_CHECK_STEP_F64: f64 = 1e-6;

/// Entries below this fraction of the largest numeric gradient are compared
/// against that fraction instead: f32 accumulation noise scales with the
/// big entries, so a tiny entry's relative error says nothing.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(floor).max(1e-8)
}

/// Compares the f32 tape gradient of `f` at `x` against central differences
/// taken on an f64 evaluation of `f`. Error per entry is
/// `|a - n| / max(|a| + |n|, GRAD_CHECK_FLOOR * max|n|, 1e-8)`; the report
/// passes iff the max is `<= tol`.
pub fn grad_check(f: &impl ScalarFn, x: &Tensor, tol: f64) -> Result<GradCheckReport> {
    let analytic = analytic_grad(f, x)?;
    let x64: Tensor<f64> = x.cast();
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(probe);
        let out = f.eval(&mut tape, v)?;
        tape.value(out).item()
    };
    let numeric = central_differences(&x64, eval)?;
    Ok(report(analytic, numeric, tol))
}

/// [`grad_check`] with the finite differences also taken in f32.
pub fn grad_check_f32<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv, x.len());
    let h = GRAD_CHECK_STEP as f32;
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut values = [0.0f64; 2];
        for (slot, sign) in values.iter_mut().zip([1.0f32, -1.0]) {
            let mut probe = x.clone();
            probe.data_mut()[i] += sign * h;
            let mut tape = Tape::new();
            let v = tape.constant(probe);
            let out = f(&mut tape, v)?;
            *slot = tape.value(out).item()? as f64;
        }
        numeric.push((values[0] - values[1]) / (2.0 * h as f64));
    }
    Ok(report(analytic, numeric, tol))
}

fn analytic_grad(f: &impl ScalarFn, x: &Tensor) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f.eval(&mut tape, xv)?;
    Ok(tape.backward(out)?.wrt(xv, x.len()))
}

fn central_differences(
    x: &Tensor<f64>,
    eval: impl Fn(Tensor<f64>) -> Result<f64>,
) -> Result<Vec<f64>> {
    let h = GRAD_CHECK_STEP_F64;
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
        })
        .collect()
}

fn report(analytic: Vec<f32>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let (mut max_rel_err, mut worst_index) = (0.0f64, 0);
    let floor = GRAD_CHECK_FLOOR * numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(a as f64, n, floor);
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        passed: max_rel_err <= tol,
    }
}

pub fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

pub fn silu<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

pub(crate) fn log_sum_exp<E: Element>(row: &[E]) -> f64 {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max).f64();
    let s: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_into<E: Element>(row: &[E], out: &mut [E]) {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut s = 0.0f64;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        s += e.f64();
    }
    let inv = E::of(1.0 / s);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn transpose<E: Element>(a: &[E], m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `a [m,k] * b [k,n]`
pub(crate) fn gemm<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (p, &aip) in arow.iter().enumerate() {
            if aip == E::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// `a [m,k] * b^T` with `b [n,k]`
fn gemm_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b` with `a [k,m]`, `b [k,n]`
fn gemm_tn<E: Element>(a: &[E], b: &[E], k: usize, m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == E::zero() {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
    out
}
