//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations append nodes in execution order, so the tape itself is the
//! topological order and backward is a single reverse sweep that visits each
//! node exactly once. The op set is static: every kind has a hand-written
//! backward that is covered by the finite-difference suite.
//!
//! Everything is single-threaded and the reduction order is fixed, so two
//! identical graphs produce bit-for-bit identical outputs and gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{shape_string, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `a[..., n] + v[n]`, broadcasting `v` over leading axes.
    AddBcastLast { a: NodeId, v: NodeId },
    /// `a[..., n] * v[n]`, broadcasting `v` over leading axes.
    MulBcastLast { a: NodeId, v: NodeId },
    /// `a * s` where `s` is a single-element node.
    MulBcastScalar { a: NodeId, s: NodeId },
    Scale { a: NodeId, c: T },
    Offset { a: NodeId },
    Matmul { a: NodeId, b: NodeId },
    /// `a[m,k] * b[n,k]^T`.
    MatmulNt { a: NodeId, b: NodeId },
    /// `x[m,k] * w[k,n] + b[n]`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, g: NodeId, b: NodeId, eps: T },
    Gelu { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Sqrt { a: NodeId },
    Pow { a: NodeId, p: T },
    Clamp { a: NodeId, lo: T, hi: T },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    ConcatLast { parts: Vec<NodeId> },
    SliceLast { a: NodeId, start: usize, len: usize },
    SliceRows { a: NodeId, start: usize, len: usize },
    /// 1-D convolution over the sequence axis, zero-padded to keep length.
    Conv1d { x: NodeId, k: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    /// Mean negative log-likelihood of `targets` under row-softmax of logits.
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Computation graph: topologically ordered op records plus leaf parameters.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Registers a trainable or constant leaf; gradient tracking follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let needs_grad = tensor.requires_grad;
        self.push_unchecked(Op::Leaf, tensor, needs_grad)
    }

    /// Registers a constant leaf regardless of the tensor's grad flag.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.requires_grad = false;
        self.push_unchecked(Op::Leaf, tensor, false)
    }

    fn push_unchecked(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        for (i, v) in value.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    node: id,
                    detail: format!("op produced non-finite value {v} at flat index {i}"),
                });
            }
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(id))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dimension(format!(
                "{what}: shapes {} and {} differ",
                shape_string(sa),
                shape_string(sb)
            )));
        }
        Ok(())
    }

    // ── Elementwise and broadcast ops ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add { a, b }, value, self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub { a, b }, value, self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul { a, b }, value, self.needs(a) || self.needs(b))
    }

    pub fn add_bcast_last(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let n = self.bcast_width(a, v, "add_bcast_last")?;
        let av = self.value(a);
        let vv = self.value(v).data();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + vv[i % n]).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::AddBcastLast { a, v }, value, self.needs(a) || self.needs(v))
    }

    pub fn mul_bcast_last(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let n = self.bcast_width(a, v, "mul_bcast_last")?;
        let av = self.value(a);
        let vv = self.value(v).data();
        let data = av.data().iter().enumerate().map(|(i, &x)| x * vv[i % n]).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::MulBcastLast { a, v }, value, self.needs(a) || self.needs(v))
    }

    fn bcast_width(&self, a: NodeId, v: NodeId, what: &str) -> Result<usize> {
        let n = self.value(a).last_dim();
        let vn = self.value(v).numel();
        if vn != n {
            return Err(Error::dimension(format!(
                "{what}: vector has {vn} elements, last axis is {n}"
            )));
        }
        Ok(n)
    }

    pub fn mul_bcast_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::dimension("mul_bcast_scalar: scalar operand must have one element"));
        }
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|x| x * sv);
        self.push(Op::MulBcastScalar { a, s }, value, self.needs(a) || self.needs(s))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale { a, c }, value, self.needs(a))
    }

    pub fn offset(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::Offset { a }, value, self.needs(a))
    }

    // ── Matrix ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul: inner dims {k} and {k2} differ (shapes {} x {})",
                shape_string(self.value(a).shape()),
                shape_string(self.value(b).shape())
            )));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(Op::Matmul { a, b }, value, self.needs(a) || self.needs(b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul_nt: inner dims {k} and {k2} differ"
            )));
        }
        let data = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(Op::MatmulNt { a, b }, value, self.needs(a) || self.needs(b))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(x).dims2()?;
        let (k2, n) = self.value(w).dims2()?;
        if k != k2 || self.value(b).numel() != n {
            return Err(Error::dimension(format!(
                "affine: x {} w {} b {}",
                shape_string(self.value(x).shape()),
                shape_string(self.value(w).shape()),
                shape_string(self.value(b).shape())
            )));
        }
        let mut data = matmul_kernel(self.value(x).data(), self.value(w).data(), m, k, n);
        let bias = self.value(b).data();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + bias[i % n];
        }
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Affine { x, w, b }, value, needs)
    }

    // ── Nonlinearities ─────────────────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let n = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Softmax { a }, value, self.needs(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId, eps: T) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(g).numel() != n || self.value(b).numel() != n {
            return Err(Error::dimension("layer_norm: scale/offset must match last axis"));
        }
        let gd = self.value(g).data();
        let bd = self.value(b).data();
        let inv_n = T::from64(1.0 / n as f64);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_n;
            let inv_std = (var + eps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(g) || self.needs(b);
        self.push(Op::LayerNorm { x, g, b, eps }, value, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(gelu_scalar);
        self.push(Op::Gelu { a }, value, self.needs(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh { a }, value, self.needs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(sigmoid_scalar);
        self.push(Op::Sigmoid { a }, value, self.needs(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| x.sqrt());
        self.push(Op::Sqrt { a }, value, self.needs(a))
    }

    pub fn pow(&mut self, a: NodeId, p: T) -> Result<NodeId> {
        let value = self.value(a).map(|x| x.powf(p));
        self.push(Op::Pow { a, p }, value, self.needs(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::dimension("clamp: lo > hi"));
        }
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp { a, lo, hi }, value, self.needs(a))
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let inv = T::from64(1.0 / av.numel() as f64);
        let sum = av.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::MeanAll { a }, Tensor::scalar(sum * inv), self.needs(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let sum = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::SumAll { a }, Tensor::scalar(sum), self.needs(a))
    }

    // ── Shape ops ──────────────────────────────────────────────────────

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dimension("concat_last: no parts"));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dimension("concat_last: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatLast { parts: parts.to_vec() }, value, needs)
    }

    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + len > cols {
            return Err(Error::dimension(format!(
                "slice_last: {start}..{} out of {cols} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for row in 0..rows {
            data.extend_from_slice(&src[row * cols + start..row * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        self.push(Op::SliceLast { a, start, len }, value, self.needs(a))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let rows = shape[0];
        if start + len > rows {
            return Err(Error::dimension(format!(
                "slice_rows: {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let stride: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let data = src[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push(Op::SliceRows { a, start, len }, value, self.needs(a))
    }

    // ── Structured ops ─────────────────────────────────────────────────

    /// `x[s, c_in]` convolved along the sequence axis with `k[w, c_in, c_out]`,
    /// zero-padded so the output keeps `s` rows.
    pub fn conv1d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let (s, c_in) = self.value(x).dims2()?;
        let kshape = self.value(k).shape();
        if kshape.len() != 3 || kshape[1] != c_in {
            return Err(Error::dimension(format!(
                "conv1d: kernel shape {} does not match input width {c_in}",
                shape_string(kshape)
            )));
        }
        let (w, c_out) = (kshape[0], kshape[2]);
        if s < w {
            return Err(Error::input(format!(
                "conv1d: sequence length {s} shorter than kernel width {w}"
            )));
        }
        let pad = (w - 1) / 2;
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let mut data = vec![T::zero(); s * c_out];
        for t in 0..s {
            for j in 0..w {
                let src = t + j;
                if src < pad || src - pad >= s {
                    continue;
                }
                let xrow = &xd[(src - pad) * c_in..(src - pad + 1) * c_in];
                let out = &mut data[t * c_out..(t + 1) * c_out];
                for (i, &xv) in xrow.iter().enumerate() {
                    let krow = &kd[(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                    for (o, &kv) in krow.iter().enumerate() {
                        out[o] = out[o] + xv * kv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![s, c_out], data)?;
        self.push(Op::Conv1d { x, k }, value, self.needs(x) || self.needs(k))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, dim) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::input(format!("token id {bad} out of vocab {vocab}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        self.push(Op::Embedding { table, ids: ids.to_vec() }, value, self.needs(table))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::dimension(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::input(format!("target id {bad} out of vocab {vocab}")));
        }
        let data = self.value(logits).data();
        let mut total = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            let r = &data[row * vocab..(row + 1) * vocab];
            let max = r.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = r.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            total += lse - r[t];
        }
        let mean = total * T::from64(1.0 / rows as f64);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            Tensor::scalar(mean),
            self.needs(logits),
        )
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradient buffers for every
    /// node on a `needs_grad` path; leaf gradients are read back with
    /// [`Tape::grad`] or written into tensors via [`Tape::write_leaf_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::state("backward called on an empty tape"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::state("backward: loss node does not exist"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dimension("backward: loss must be scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            self.accumulate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient buffer of a node after [`Tape::backward`]; `None` when the
    /// node was not on any differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Copies a leaf's gradient (or zeros) into the tensor's `grad` field.
    pub fn write_leaf_grad(&self, id: NodeId, tensor: &mut Tensor<T>) {
        let numel = tensor.numel();
        tensor.grad = Some(match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); numel],
        });
    }

    fn ensure<'g>(
        grads: &'g mut [Option<Vec<T>>],
        id: NodeId,
        numel: usize,
    ) -> &'g mut [T] {
        grads[id.0].get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn accumulate(&self, idx: usize, up: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for input in [*a, *b] {
                    if self.needs(input) {
                        let g = Self::ensure(grads, input, up.len());
                        for (gv, &uv) in g.iter_mut().zip(up) {
                            *gv += uv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    let g = Self::ensure(grads, *a, up.len());
                    for (gv, &uv) in g.iter_mut().zip(up) {
                        *gv += uv;
                    }
                }
                if self.needs(*b) {
                    let g = Self::ensure(grads, *b, up.len());
                    for (gv, &uv) in g.iter_mut().zip(up) {
                        *gv -= uv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let g = Self::ensure(grads, *a, up.len());
                    for ((gv, &uv), &x) in g.iter_mut().zip(up).zip(bv) {
                        *gv += uv * x;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let g = Self::ensure(grads, *b, up.len());
                    for ((gv, &uv), &x) in g.iter_mut().zip(up).zip(av) {
                        *gv += uv * x;
                    }
                }
            }
            Op::AddBcastLast { a, v } => {
                if self.needs(*a) {
                    let g = Self::ensure(grads, *a, up.len());
                    for (gv, &uv) in g.iter_mut().zip(up) {
                        *gv += uv;
                    }
                }
                if self.needs(*v) {
                    let n = self.value(*v).numel();
                    let g = Self::ensure(grads, *v, n);
                    for (i, &uv) in up.iter().enumerate() {
                        g[i % n] += uv;
                    }
                }
            }
            Op::MulBcastLast { a, v } => {
                let n = self.value(*v).numel();
                if self.needs(*a) {
                    let vv = self.value(*v).data();
                    let g = Self::ensure(grads, *a, up.len());
                    for (i, (gv, &uv)) in g.iter_mut().zip(up).enumerate() {
                        *gv += uv * vv[i % n];
                    }
                }
                if self.needs(*v) {
                    let av = self.value(*a).data();
                    let g = Self::ensure(grads, *v, n);
                    for (i, &uv) in up.iter().enumerate() {
                        g[i % n] += uv * av[i];
                    }
                }
            }
            Op::MulBcastScalar { a, s } => {
                let sv = self.value(*s).data()[0];
                if self.needs(*a) {
                    let g = Self::ensure(grads, *a, up.len());
                    for (gv, &uv) in g.iter_mut().zip(up) {
                        *gv += uv * sv;
                    }
                }
                if self.needs(*s) {
                    let av = self.value(*a).data();
                    let mut dot = T::zero();
                    for (&uv, &x) in up.iter().zip(av) {
                        dot += uv * x;
                    }
                    Self::ensure(grads, *s, 1)[0] += dot;
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let g = Self::ensure(grads, *a, up.len());
                    for (gv, &uv) in g.iter_mut().zip(up) {
                        *gv += uv * *c;
                    }
                }
            }
            Op::Offset { a } => {
                if self.needs(*a) {
                    let g = Self::ensure(grads, *a, up.len());
                    for (gv, &uv) in g.iter_mut().zip(up) {
                        *gv += uv;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("checked at forward");
                let (_, n) = self.value(*b).dims2().expect("checked at forward");
                if self.needs(*a) {
                    // dA = dC * B^T
                    let da = matmul_nt_kernel(up, self.value(*b).data(), m, n, k);
                    let g = Self::ensure(grads, *a, m * k);
                    for (gv, dv) in g.iter_mut().zip(da) {
                        *gv += dv;
                    }
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let db = matmul_tn_kernel(self.value(*a).data(), up, m, k, n);
                    let g = Self::ensure(grads, *b, k * n);
                    for (gv, dv) in g.iter_mut().zip(db) {
                        *gv += dv;
                    }
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("checked at forward");
                let (n, _) = self.value(*b).dims2().expect("checked at forward");
                if self.needs(*a) {
                    // dA = dC * B
                    let da = matmul_kernel(up, self.value(*b).data(), m, n, k);
                    let g = Self::ensure(grads, *a, m * k);
                    for (gv, dv) in g.iter_mut().zip(da) {
                        *gv += dv;
                    }
                }
                if self.needs(*b) {
                    // dB = dC^T * A
                    let db = matmul_tn_kernel(up, self.value(*a).data(), m, n, k);
                    let g = Self::ensure(grads, *b, n * k);
                    for (gv, dv) in g.iter_mut().zip(db) {
                        *gv += dv;
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let (m, k) = self.value(*x).dims2().expect("checked at forward");
                let (_, n) = self.value(*w).dims2().expect("checked at forward");
                if self.needs(*x) {
                    let dx = matmul_nt_kernel(up, self.value(*w).data(), m, n, k);
                    let g = Self::ensure(grads, *x, m * k);
                    for (gv, dv) in g.iter_mut().zip(dx) {
                        *gv += dv;
                    }
                }
                if self.needs(*w) {
                    let dw = matmul_tn_kernel(self.value(*x).data(), up, m, k, n);
                    let g = Self::ensure(grads, *w, k * n);
                    for (gv, dv) in g.iter_mut().zip(dw) {
                        *gv += dv;
                    }
                }
                if self.needs(*b) {
                    let g = Self::ensure(grads, *b, n);
                    for (i, &uv) in up.iter().enumerate() {
                        g[i % n] += uv;
                    }
                }
            }
            Op::Softmax { a } => {
                if self.needs(*a) {
                    let y = self.nodes[idx].value.data();
                    let n = self.nodes[idx].value.last_dim();
                    let g = Self::ensure(grads, *a, up.len());
                    for row in 0..up.len() / n {
                        let (ys, us) = (&y[row * n..(row + 1) * n], &up[row * n..(row + 1) * n]);
                        let mut dot = T::zero();
                        for (&yv, &uv) in ys.iter().zip(us) {
                            dot += yv * uv;
                        }
                        let gs = &mut g[row * n..(row + 1) * n];
                        for ((gv, &yv), &uv) in gs.iter_mut().zip(ys).zip(us) {
                            *gv += yv * (uv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, g: gamma, b: beta, eps } => {
                let xv = self.value(*x);
                let n = xv.last_dim();
                let rows = xv.numel() / n;
                let inv_n = T::from64(1.0 / n as f64);
                let gd = self.value(*gamma).data();
                let xd = xv.data();
                for row in 0..rows {
                    let xs = &xd[row * n..(row + 1) * n];
                    let us = &up[row * n..(row + 1) * n];
                    let mean = xs.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
                    let var =
                        xs.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_n;
                    let inv_std = (var + *eps).sqrt().recip();
                    // dyg = upstream * gamma; xhat = normalized input
                    let mut mean_dyg = T::zero();
                    let mut mean_dyg_xhat = T::zero();
                    for (j, (&uv, &xvj)) in us.iter().zip(xs).enumerate() {
                        let dyg = uv * gd[j];
                        let xhat = (xvj - mean) * inv_std;
                        mean_dyg += dyg;
                        mean_dyg_xhat += dyg * xhat;
                    }
                    mean_dyg = mean_dyg * inv_n;
                    mean_dyg_xhat = mean_dyg_xhat * inv_n;
                    if self.needs(*x) {
                        let gx = Self::ensure(grads, *x, rows * n);
                        let gxs = &mut gx[row * n..(row + 1) * n];
                        for (j, (gv, &xvj)) in gxs.iter_mut().zip(xs).enumerate() {
                            let dyg = us[j] * gd[j];
                            let xhat = (xvj - mean) * inv_std;
                            *gv += inv_std * (dyg - mean_dyg - xhat * mean_dyg_xhat);
                        }
                    }
                    if self.needs(*gamma) {
                        let gg = Self::ensure(grads, *gamma, n);
                        for (j, (&uv, &xvj)) in us.iter().zip(xs).enumerate() {
                            gg[j] += uv * (xvj - mean) * inv_std;
                        }
                    }
                    if self.needs(*beta) {
                        let gb = Self::ensure(grads, *beta, n);
                        for (j, &uv) in us.iter().enumerate() {
                            gb[j] += uv;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let xs = self.value(*a).data();
                    let g = Self::ensure(grads, *a, up.len());
                    for ((gv, &uv), &x) in g.iter_mut().zip(up).zip(xs) {
                        *gv += uv * gelu_grad_scalar(x);
                    }
                }
            }
            Op::Tanh { a } => {
                if self.needs(*a) {
                    let ys = self.nodes[idx].value.data();
                    let g = Self::ensure(grads, *a, up.len());
                    for ((gv, &uv), &y) in g.iter_mut().zip(up).zip(ys) {
                        *gv += uv * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let ys = self.nodes[idx].value.data();
                    let g = Self::ensure(grads, *a, up.len());
                    for ((gv, &uv), &y) in g.iter_mut().zip(up).zip(ys) {
                        *gv += uv * y * (T::one() - y);
                    }
                }
            }
            Op::Sqrt { a } => {
                if self.needs(*a) {
                    let ys = self.nodes[idx].value.data();
                    let half = T::from64(0.5);
                    let g = Self::ensure(grads, *a, up.len());
                    for ((gv, &uv), &y) in g.iter_mut().zip(up).zip(ys) {
                        // Subgradient 0 at the origin.
                        if y > T::zero() {
                            *gv += uv * half / y;
                        }
                    }
                }
            }
            Op::Pow { a, p } => {
                if self.needs(*a) {
                    let xs = self.value(*a).data();
                    let g = Self::ensure(grads, *a, up.len());
                    for ((gv, &uv), &x) in g.iter_mut().zip(up).zip(xs) {
                        *gv += uv * *p * x.powf(*p - T::one());
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.needs(*a) {
                    // Zero outside and at the bounds, identity strictly inside.
                    let xs = self.value(*a).data();
                    let g = Self::ensure(grads, *a, up.len());
                    for ((gv, &uv), &x) in g.iter_mut().zip(up).zip(xs) {
                        if x > *lo && x < *hi {
                            *gv += uv;
                        }
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let numel = self.value(*a).numel();
                    let c = up[0] * T::from64(1.0 / numel as f64);
                    let g = Self::ensure(grads, *a, numel);
                    for gv in g.iter_mut() {
                        *gv += c;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let numel = self.value(*a).numel();
                    let g = Self::ensure(grads, *a, numel);
                    for gv in g.iter_mut() {
                        *gv += up[0];
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let rows = self.nodes[idx].value.shape()[0];
                let total = self.nodes[idx].value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.needs(p) {
                        let g = Self::ensure(grads, p, rows * w);
                        for row in 0..rows {
                            let src = &up[row * total + offset..row * total + offset + w];
                            let dst = &mut g[row * w..(row + 1) * w];
                            for (gv, &uv) in dst.iter_mut().zip(src) {
                                *gv += uv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { a, start, len } => {
                if self.needs(*a) {
                    let (rows, cols) = self.value(*a).dims2().expect("checked at forward");
                    let g = Self::ensure(grads, *a, rows * cols);
                    for row in 0..rows {
                        let src = &up[row * len..(row + 1) * len];
                        let dst = &mut g[row * cols + start..row * cols + start + len];
                        for (gv, &uv) in dst.iter_mut().zip(src) {
                            *gv += uv;
                        }
                    }
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape();
                    let stride: usize = shape[1..].iter().product();
                    let numel = self.value(*a).numel();
                    let g = Self::ensure(grads, *a, numel);
                    let dst = &mut g[start * stride..(start + len) * stride];
                    for (gv, &uv) in dst.iter_mut().zip(up) {
                        *gv += uv;
                    }
                }
            }
            Op::Conv1d { x, k } => {
                let (s, c_in) = self.value(*x).dims2().expect("checked at forward");
                let kshape = self.value(*k).shape();
                let (w, c_out) = (kshape[0], kshape[2]);
                let pad = (w - 1) / 2;
                if self.needs(*x) {
                    let kd = self.value(*k).data();
                    let g = Self::ensure(grads, *x, s * c_in);
                    for t in 0..s {
                        for j in 0..w {
                            let src = t + j;
                            if src < pad || src - pad >= s {
                                continue;
                            }
                            let urow = &up[t * c_out..(t + 1) * c_out];
                            let grow = &mut g[(src - pad) * c_in..(src - pad + 1) * c_in];
                            for (i, gv) in grow.iter_mut().enumerate() {
                                let krow = &kd[(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                                for (&uv, &kv) in urow.iter().zip(krow) {
                                    *gv += uv * kv;
                                }
                            }
                        }
                    }
                }
                if self.needs(*k) {
                    let xd = self.value(*x).data();
                    let g = Self::ensure(grads, *k, w * c_in * c_out);
                    for t in 0..s {
                        let urow = &up[t * c_out..(t + 1) * c_out];
                        for j in 0..w {
                            let src = t + j;
                            if src < pad || src - pad >= s {
                                continue;
                            }
                            let xrow = &xd[(src - pad) * c_in..(src - pad + 1) * c_in];
                            for (i, &xv) in xrow.iter().enumerate() {
                                let grow =
                                    &mut g[(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                                for (gv, &uv) in grow.iter_mut().zip(urow) {
                                    *gv += uv * xv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let (vocab, dim) = self.value(*table).dims2().expect("checked at forward");
                    let g = Self::ensure(grads, *table, vocab * dim);
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &up[row * dim..(row + 1) * dim];
                        let dst = &mut g[id * dim..(id + 1) * dim];
                        for (gv, &uv) in dst.iter_mut().zip(src) {
                            *gv += uv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let (rows, vocab) = self.value(*logits).dims2().expect("checked at forward");
                    let data = self.value(*logits).data();
                    let scale = up[0] * T::from64(1.0 / rows as f64);
                    let g = Self::ensure(grads, *logits, rows * vocab);
                    let mut probs = vec![T::zero(); vocab];
                    for (row, &t) in targets.iter().enumerate() {
                        let r = &data[row * vocab..(row + 1) * vocab];
                        let max = r.iter().cloned().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for (pv, &v) in probs.iter_mut().zip(r) {
                            *pv = (v - max).exp();
                            sum += *pv;
                        }
                        let gs = &mut g[row * vocab..(row + 1) * vocab];
                        for (j, (gv, &pv)) in gs.iter_mut().zip(&probs).enumerate() {
                            let delta = if j == t { T::one() } else { T::zero() };
                            *gv += (pv / sum - delta) * scale;
                        }
                    }
                }
            }
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

/// `c[m,n] = a[m,k] * b[k,n]`, fixed ikj order.
fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T`.
fn matmul_nt_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T * b[m,n]`.
fn matmul_tn_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shapes already checked")
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

/// Tanh-approximation GELU.
fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from64(0.044715);
    let half = T::from64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::from64(0.7978845608028654);
    let a = T::from64(0.044715);
    let half = T::from64(0.5);
    let three = T::from64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
