//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A `Tape` is rebuilt for every forward pass. Leaves are either plain
//! inputs or named parameters from a [`ParamStore`](crate::params::ParamStore);
//! `backward` walks the tape once in reverse and accumulates gradients with a
//! fixed reduction order. Tensors on a live tape are never mutated.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{quantize, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask; `allowed[q * cols + k]` says whether query row q
/// may attend to key k. Every row must keep at least one allowed entry.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), rows * cols);
        for q in 0..rows {
            assert!(
                allowed[q * cols..(q + 1) * cols].iter().any(|&a| a),
                "attention mask row {} has no allowed entries",
                q
            );
        }
        AttnMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                allowed[q * len + k] = true;
            }
        }
        AttnMask::new(len, len, allowed)
    }

    #[inline]
    pub fn at(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
    AddBias(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Softmax(Var),
    MaskedSoftmax(Var, Rc<AttnMask>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Embedding {
        table: Var,
        ids: Rc<Vec<usize>>,
    },
    EmbeddingSplit {
        base: Var,
        ext: Var,
        ids: Rc<Vec<usize>>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvT1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    StraightThrough(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        mask: Rc<Vec<f64>>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients keyed by `ParamId`, in deterministic id order.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id.index())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().map(|&i| ParamId::from_index(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(&i, t)| (ParamId::from_index(i), t))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Insert or overwrite a gradient directly (used by tests and by the
    /// gradient-accumulation equivalence checks).
    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id.index(), grad);
    }

    fn insert_add(&mut self, id: ParamId, grad: &Tensor) {
        match self.map.get_mut(&id.index()) {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a = quantize(*a + g);
                }
            }
            None => {
                self.map.insert(id.index(), grad.clone());
            }
        }
    }

    /// Accumulate another gradient set (micro-batch accumulation).
    pub fn add(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.insert_add(id, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v = quantize(*v * c);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.is_finite())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.assert_finite(op_name(&op));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Leaf that collects a gradient but is not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Parameter leaf; gradient is reported under the parameter's id when the
    /// parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(
            store.value(id).clone(),
            Op::Leaf {
                param: Some(id),
            },
            trainable,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = Tensor::from_fn(self.value(a).shape().to_vec(), |i| {
            self.value(a).data()[i] * self.value(b).data()[i]
        });
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.requires(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Multiply a tensor by a single-element tensor variable.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "scale_var scalar");
        let c = self.value(s).data()[0];
        let v = self.value(a).scale(c);
        let rg = self.requires(a) || self.requires(s);
        self.push(v, Op::ScaleVar(a, s), rg)
    }

    /// Add a length-n bias vector to every row of an m-by-n matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(b).shape(), &[n], "bias length");
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(self.value(b).data()) {
                *o = quantize(*o + bv);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::AddBias(a, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.requires(a) || self.requires(b);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transposed();
        let rg = self.requires(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).numel(), "reshape numel");
        let v = Tensor::from_vec(shape, self.value(a).data().to_vec());
        let rg = self.requires(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.value(p).cols(), cols, "concat_rows col mismatch");
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(
            Tensor::from_vec(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut off = 0;
        for &p in parts {
            let pc = self.value(p).cols();
            assert_eq!(self.value(p).rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                let src = self.value(p).row(i).to_vec();
                out.row_mut(i)[off..off + pc].copy_from_slice(&src);
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        assert!(start + len <= rows, "slice_rows out of range");
        let mut data = Vec::with_capacity(len * cols);
        for i in start..start + len {
            data.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.requires(a);
        self.push(
            Tensor::from_vec(vec![len, cols], data),
            Op::SliceRows(a, start, len),
            rg,
        )
    }

    /// Column slice; on a rank-1 tensor this slices the vector itself.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let rank1 = t.rank() == 1;
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let shape = if rank1 { vec![len] } else { vec![rows, len] };
        let rg = self.requires(a);
        self.push(
            Tensor::from_vec(shape, data),
            Op::SliceCols(a, start, len),
            rg,
        )
    }

    /// Numerically-stable softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(cols >= 1, "softmax on empty axis");
        let mut out = t.clone();
        for i in 0..rows {
            softmax_row_inplace(out.row_mut(i));
        }
        for v in out.data_mut() {
            *v = quantize(*v);
        }
        let rg = self.requires(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Softmax over the allowed entries of each row; disallowed entries get
    /// exactly zero probability. No infinities are ever materialized.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<AttnMask>) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), mask.rows, "mask rows");
        assert_eq!(t.cols(), mask.cols, "mask cols");
        let mut out = t.clone();
        for q in 0..mask.rows {
            let row = out.row_mut(q);
            let allowed = &mask.allowed[q * mask.cols..(q + 1) * mask.cols];
            masked_softmax_row_inplace(row, allowed);
        }
        for v in out.data_mut() {
            *v = quantize(*v);
        }
        let rg = self.requires(a);
        self.push(out, Op::MaskedSoftmax(a, mask), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_scalar);
        let rg = self.requires(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Layer normalization over the trailing axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = 1e-5;
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(self.value(gamma).shape(), &[cols], "gamma shape");
        assert_eq!(self.value(beta).shape(), &[cols], "beta shape");
        let mut out = t.clone();
        for i in 0..rows {
            let row = out.row_mut(i);
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                let xh = (*v - mu) * inv;
                *v = quantize(self.nodes[gamma.0].value.data()[j] * xh
                    + self.nodes[beta.0].value.data()[j]);
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        )
    }

    /// Gather rows of `table` by id; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let t = self.value(table);
        assert_eq!(t.rank(), 2, "embedding table rank");
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            assert!(id < n, "embedding id {} out of range {}", id, n);
            data.extend_from_slice(t.row(id));
        }
        let rg = self.requires(table);
        self.push(
            Tensor::from_vec(vec![ids.len(), d], data),
            Op::Embedding { table, ids },
            rg,
        )
    }

    /// Gather from two stacked tables: ids below `base` row count hit the
    /// base table, the rest hit the extension table at `id - base_rows`.
    pub fn embedding_split(&mut self, base: Var, ext: Var, ids: Rc<Vec<usize>>) -> Var {
        let (bn, d) = (self.value(base).shape()[0], self.value(base).shape()[1]);
        let en = self.value(ext).shape()[0];
        assert_eq!(self.value(ext).shape()[1], d, "ext table width");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            if id < bn {
                data.extend_from_slice(self.value(base).row(id));
            } else {
                assert!(id - bn < en, "token id {} out of range {}", id, bn + en);
                data.extend_from_slice(self.value(ext).row(id - bn));
            }
        }
        let rg = self.requires(base) || self.requires(ext);
        self.push(
            Tensor::from_vec(vec![ids.len(), d], data),
            Op::EmbeddingSplit { base, ext, ids },
            rg,
        )
    }

    /// Temporal convolution. `x` is frames-by-channels, `w` is
    /// `[kernel, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (f, c_in) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 3, "conv weight rank");
        let (k, c_out) = (ws[0], ws[2]);
        assert_eq!(ws[1], c_in, "conv c_in");
        assert_eq!(self.value(b).shape(), &[c_out], "conv bias");
        assert!(
            f + 2 * pad >= k,
            "conv1d output length < 1 (F={}, k={}, pad={})",
            f,
            k,
            pad
        );
        let f_out = (f + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(vec![f_out, c_out]);
        for t in 0..f_out {
            let row = out.row_mut(t);
            row.copy_from_slice(self.value(b).data());
            for dt in 0..k {
                let ti = (t * stride + dt) as isize - pad as isize;
                if ti < 0 || ti >= f as isize {
                    continue;
                }
                let xr = self.value(x).row(ti as usize);
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &self.value(w).data()[(dt * c_in + ci) * c_out..][..c_out];
                    for (o, &wv) in row.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
            for v in row.iter_mut() {
                *v = quantize(*v);
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Transposed temporal convolution (upsampling counterpart of `conv1d`).
    pub fn conv1d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (f, c_in) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        let ws = self.value(w).shape().to_vec();
        let (k, c_out) = (ws[0], ws[2]);
        assert_eq!(ws[1], c_in, "convT c_in");
        assert_eq!(self.value(b).shape(), &[c_out], "convT bias");
        let f_out = (f - 1) * stride + k + out_pad;
        assert!(f_out > 2 * pad, "convT output length < 1");
        let f_out = f_out - 2 * pad;
        let mut out = Tensor::zeros(vec![f_out, c_out]);
        for t in 0..f_out {
            out.row_mut(t).copy_from_slice(self.value(b).data());
        }
        for t in 0..f {
            let xr = self.value(x).row(t).to_vec();
            for dt in 0..k {
                let to = (t * stride + dt) as isize - pad as isize;
                if to < 0 || to >= f_out as isize {
                    continue;
                }
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &self.value(w).data()[(dt * c_in + ci) * c_out..][..c_out];
                    let orow = out.row_mut(to as usize);
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        for v in out.data_mut() {
            *v = quantize(*v);
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out, Op::ConvT1d { x, w, b, stride, pad }, rg)
    }

    /// Straight-through hop: forward takes the quantized value `z`, backward
    /// copies the gradient to the encoder output unchanged.
    pub fn straight_through(&mut self, z_hat: Var, z: Tensor) -> Var {
        assert_eq!(self.value(z_hat).shape(), z.shape(), "straight_through shapes");
        let rg = self.requires(z_hat);
        self.push(z, Op::StraightThrough(z_hat), rg)
    }

    /// Mean masked next-token loss: `-log softmax(logits)[target]` averaged
    /// over positions with nonzero mask weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>, mask: Rc<Vec<f64>>) -> Var {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(targets.len(), rows, "targets length");
        assert_eq!(mask.len(), rows, "mask length");
        let total: f64 = mask.iter().sum();
        assert!(total > 0.0, "cross_entropy with empty mask");
        let mut loss = 0.0;
        for i in 0..rows {
            if mask[i] == 0.0 {
                continue;
            }
            assert!(targets[i] < cols, "target id {} out of range", targets[i]);
            let row = t.row(i);
            let lse = log_sum_exp(row);
            loss += mask[i] * (lse - row[targets[i]]);
        }
        let v = Tensor::scalar(loss / total);
        let rg = self.requires(logits);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.requires(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        let rg = self.requires(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean squared error between two same-shape vars.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Run reverse-mode accumulation from a scalar loss. Gradients for every
    /// grad-requiring node are kept on the tape; call `param_grads` to pull
    /// out the per-parameter map.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    /// Collect gradients of parameter leaves after `backward`.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if node.requires_grad {
                    if let Some(g) = &self.grads[idx] {
                        out.insert_add(id, g);
                    }
                }
            }
        }
        out
    }

    fn add_grad(&mut self, v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a = quantize(*a + g);
                }
            }
            slot @ None => {
                let mut c = contribution;
                for v in c.data_mut() {
                    *v = quantize(*v);
                }
                *slot = Some(c);
            }
        }
    }

    fn apply_backward(&mut self, idx: usize, g: &Tensor) {
        // Ops read values immutably, then write grads; split via raw clone of
        // the small metadata to satisfy the borrow checker.
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g.clone());
                self.add_grad(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g.clone());
                self.add_grad(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let ga = Tensor::from_fn(g.shape().to_vec(), |i| {
                        g.data()[i] * self.value(b).data()[i]
                    });
                    self.add_grad(a, ga);
                }
                if self.requires(b) {
                    let gb = Tensor::from_fn(g.shape().to_vec(), |i| {
                        g.data()[i] * self.value(a).data()[i]
                    });
                    self.add_grad(b, gb);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.add_grad(a, g.scale(c));
            }
            Op::ScaleVar(a, s) => {
                let (a, s) = (*a, *s);
                let c = self.value(s).data()[0];
                if self.requires(a) {
                    self.add_grad(a, g.scale(c));
                }
                if self.requires(s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.add_grad(s, Tensor::scalar(dot));
                }
            }
            Op::AddBias(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.add_grad(a, g.clone());
                }
                if self.requires(b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for i in 0..g.rows() {
                        for (d, &gv) in db.iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    self.add_grad(b, Tensor::from_vec(vec![n], db));
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let bt = self.value(b).transposed();
                    self.add_grad(a, g.matmul(&bt));
                }
                if self.requires(b) {
                    let at = self.value(a).transposed();
                    self.add_grad(b, at.matmul(g));
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                self.add_grad(a, g.transposed());
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, Tensor::from_vec(shape, g.data().to_vec()));
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    let cols = self.value(p).cols();
                    if self.requires(p) {
                        let mut data = Vec::with_capacity(rows * cols);
                        for i in start..start + rows {
                            data.extend_from_slice(g.row(i));
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.add_grad(p, Tensor::from_vec(shape, data));
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = g.rows();
                let mut off = 0;
                for p in parts {
                    let pc = self.value(p).cols();
                    if self.requires(p) {
                        let mut data = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            data.extend_from_slice(&g.row(i)[off..off + pc]);
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.add_grad(p, Tensor::from_vec(shape, data));
                    }
                    off += pc;
                }
            }
            Op::SliceRows(a, start, len) => {
                let (a, start, len) = (*a, *start, *len);
                let shape = self.value(a).shape().to_vec();
                let mut full = Tensor::zeros(shape);
                for i in 0..len {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.add_grad(a, full);
            }
            Op::SliceCols(a, start, len) => {
                let (a, start, len) = (*a, *start, *len);
                let shape = self.value(a).shape().to_vec();
                let rows = self.value(a).rows();
                let mut full = Tensor::zeros(shape);
                for i in 0..rows {
                    full.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                self.add_grad(a, full);
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[idx].value.clone();
                let mut dx = y.clone();
                for i in 0..y.rows() {
                    softmax_backward_row(dx.row_mut(i), g.row(i), y.row(i));
                }
                self.add_grad(a, dx);
            }
            Op::MaskedSoftmax(a, _mask) => {
                // y is zero at disallowed entries, so the plain softmax
                // backward formula already sends them zero gradient.
                let a = *a;
                let y = self.nodes[idx].value.clone();
                let mut dx = y.clone();
                for i in 0..y.rows() {
                    softmax_backward_row(dx.row_mut(i), g.row(i), y.row(i));
                }
                self.add_grad(a, dx);
            }
            Op::Gelu(a) => {
                let a = *a;
                let dx = Tensor::from_fn(g.shape().to_vec(), |i| {
                    g.data()[i] * gelu_grad_scalar(self.value(a).data()[i])
                });
                self.add_grad(a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xv = self.value(x).clone();
                let gv = self.value(gamma).clone();
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for i in 0..rows {
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let (mu, var) = mean_var(xr);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xh: Vec<f64> = xr.iter().map(|&v| (v - mu) * inv).collect();
                    let gh: Vec<f64> =
                        gr.iter().zip(gv.data()).map(|(&gg, &ga)| gg * ga).collect();
                    let mean_gh: f64 = gh.iter().sum::<f64>() / cols as f64;
                    let mean_gh_xh: f64 =
                        gh.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx.row_mut(i)[j] = inv * (gh[j] - mean_gh - xh[j] * mean_gh_xh);
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                }
                if self.requires(x) {
                    self.add_grad(x, dx);
                }
                if self.requires(gamma) {
                    self.add_grad(gamma, Tensor::from_vec(vec![cols], dgamma));
                }
                if self.requires(beta) {
                    self.add_grad(beta, Tensor::from_vec(vec![cols], dbeta));
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let shape = self.value(table).shape().to_vec();
                let mut dt = Tensor::zeros(shape);
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &gv) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                self.add_grad(table, dt);
            }
            Op::EmbeddingSplit { base, ext, ids } => {
                let (base, ext) = (*base, *ext);
                let ids = ids.clone();
                let bn = self.value(base).shape()[0];
                if self.requires(base) {
                    let shape = self.value(base).shape().to_vec();
                    let mut db = Tensor::zeros(shape);
                    for (i, &id) in ids.iter().enumerate() {
                        if id < bn {
                            for (d, &gv) in db.row_mut(id).iter_mut().zip(g.row(i)) {
                                *d += gv;
                            }
                        }
                    }
                    self.add_grad(base, db);
                }
                if self.requires(ext) {
                    let shape = self.value(ext).shape().to_vec();
                    let mut de = Tensor::zeros(shape);
                    for (i, &id) in ids.iter().enumerate() {
                        if id >= bn {
                            for (d, &gv) in de.row_mut(id - bn).iter_mut().zip(g.row(i)) {
                                *d += gv;
                            }
                        }
                    }
                    self.add_grad(ext, de);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xv = self.value(x).clone();
                let wv = self.value(w).clone();
                let (f, c_in) = (xv.shape()[0], xv.shape()[1]);
                let (k, c_out) = (wv.shape()[0], wv.shape()[2]);
                let f_out = g.rows();
                let mut dx = Tensor::zeros(vec![f, c_in]);
                let mut dw = Tensor::zeros(vec![k, c_in, c_out]);
                let mut db = vec![0.0; c_out];
                for t in 0..f_out {
                    let gr = g.row(t);
                    for (d, &gv) in db.iter_mut().zip(gr) {
                        *d += gv;
                    }
                    for dt in 0..k {
                        let ti = (t * stride + dt) as isize - pad as isize;
                        if ti < 0 || ti >= f as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for ci in 0..c_in {
                            let wrow = &wv.data()[(dt * c_in + ci) * c_out..][..c_out];
                            let mut acc = 0.0;
                            for (co, &gv) in gr.iter().enumerate() {
                                acc += gv * wrow[co];
                                dw.data_mut()[(dt * c_in + ci) * c_out + co] +=
                                    xv.at2(ti, ci) * gv;
                            }
                            dx.data_mut()[ti * c_in + ci] += acc;
                        }
                    }
                }
                if self.requires(x) {
                    self.add_grad(x, dx);
                }
                if self.requires(w) {
                    self.add_grad(w, dw);
                }
                if self.requires(b) {
                    self.add_grad(b, Tensor::from_vec(vec![c_out], db));
                }
            }
            Op::ConvT1d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xv = self.value(x).clone();
                let wv = self.value(w).clone();
                let (f, c_in) = (xv.shape()[0], xv.shape()[1]);
                let (k, c_out) = (wv.shape()[0], wv.shape()[2]);
                let f_out = g.rows();
                let mut dx = Tensor::zeros(vec![f, c_in]);
                let mut dw = Tensor::zeros(vec![k, c_in, c_out]);
                let mut db = vec![0.0; c_out];
                for t in 0..f_out {
                    for (d, &gv) in db.iter_mut().zip(g.row(t)) {
                        *d += gv;
                    }
                }
                for t in 0..f {
                    for dt in 0..k {
                        let to = (t * stride + dt) as isize - pad as isize;
                        if to < 0 || to >= f_out as isize {
                            continue;
                        }
                        let gr = g.row(to as usize);
                        for ci in 0..c_in {
                            let wrow = &wv.data()[(dt * c_in + ci) * c_out..][..c_out];
                            let mut acc = 0.0;
                            for (co, &gv) in gr.iter().enumerate() {
                                acc += gv * wrow[co];
                                dw.data_mut()[(dt * c_in + ci) * c_out + co] +=
                                    xv.at2(t, ci) * gv;
                            }
                            dx.data_mut()[t * c_in + ci] += acc;
                        }
                    }
                }
                if self.requires(x) {
                    self.add_grad(x, dx);
                }
                if self.requires(w) {
                    self.add_grad(w, dw);
                }
                if self.requires(b) {
                    self.add_grad(b, Tensor::from_vec(vec![c_out], db));
                }
            }
            Op::StraightThrough(z_hat) => {
                let z_hat = *z_hat;
                self.add_grad(z_hat, g.clone());
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let lv = self.value(logits).clone();
                let (rows, cols) = (lv.rows(), lv.cols());
                let total: f64 = mask.iter().sum();
                let gs = g.data()[0];
                let mut dl = Tensor::zeros(vec![rows, cols]);
                for i in 0..rows {
                    if mask[i] == 0.0 {
                        continue;
                    }
                    let coeff = gs * mask[i] / total;
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    let dr = dl.row_mut(i);
                    for (j, &l) in row.iter().enumerate() {
                        dr[j] = coeff * (l - lse).exp();
                    }
                    dr[targets[i]] -= coeff;
                }
                self.add_grad(logits, dl);
            }
            Op::Sum(a) => {
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                let n: usize = shape.iter().product();
                self.add_grad(a, Tensor::full(shape, g.data()[0] / n as f64));
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::ScaleVar(..) => "scale_var",
        Op::AddBias(..) => "add_bias",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Softmax(..) => "softmax",
        Op::MaskedSoftmax(..) => "masked_softmax",
        Op::Gelu(..) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::EmbeddingSplit { .. } => "embedding_split",
        Op::Conv1d { .. } => "conv1d",
        Op::ConvT1d { .. } => "conv1d_transpose",
        Op::StraightThrough(..) => "straight_through",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn masked_softmax_row_inplace(row: &mut [f64], allowed: &[bool]) {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "masked softmax row with no allowed entries");
    let mut sum = 0.0;
    for (v, &a) in row.iter_mut().zip(allowed) {
        if a {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// dx = y * (g - <g, y>)
fn softmax_backward_row(dx: &mut [f64], g: &[f64], y: &[f64]) {
    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
        *d = yv * (gv - dot);
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Precision, PrecisionGuard};
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_forward_and_backward_hand_case() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).data(), &[17.0, 39.0]);
        let loss = t.sum(c);
        t.backward(loss);
        // d sum(ab) / da = ones * b^T ; / db = a^T * ones
        assert_eq!(t.grad(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_and_ratio() {
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(vec![4], vec![0.0; 4]));
        let y = t.softmax(x);
        for &v in t.value(y).data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-9);
        }
        let c = 3.7;
        let x2 = t.input(Tensor::from_vec(vec![2], vec![c, c + (2.0f64).ln()]));
        let y2 = t.softmax(x2);
        assert_abs_diff_eq!(t.value(y2).data()[0], 1.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.value(y2).data()[1], 2.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "softmax-test");
        let mut t = Tape::new();
        let x = t.input(Tensor::from_fn(vec![5, 7], |_| rng.gen_range(-4.0..4.0)));
        let y = t.softmax(x);
        for i in 0..5 {
            let s: f64 = t.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(t.value(y).row(i).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut t = Tape::new();
        let logits = t.input(Tensor::zeros(vec![3, 8]));
        let loss = t.cross_entropy(logits, Rc::new(vec![1, 5, 2]), Rc::new(vec![1.0; 3]));
        assert_abs_diff_eq!(t.value(loss).item(), (8.0f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn cross_entropy_hand_case() {
        // logits [1,2,3], target 2 -> 0.40761
        let mut t = Tape::new();
        let logits = t.input(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let loss = t.cross_entropy(logits, Rc::new(vec![2]), Rc::new(vec![1.0]));
        assert_abs_diff_eq!(t.value(loss).item(), 0.40761, epsilon = 1e-5);
    }

    #[test]
    fn cross_entropy_one_hot_limit() {
        let mut t = Tape::new();
        for mag in [5.0, 20.0, 60.0] {
            let mut logits = Tensor::zeros(vec![1, 4]);
            logits.set2(0, 3, mag);
            let l = t.input(logits);
            let loss = t.cross_entropy(l, Rc::new(vec![3]), Rc::new(vec![1.0]));
            assert!(t.value(loss).item() < (-mag / 2.0).exp() * 4.0 + 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "empty mask")]
    fn cross_entropy_empty_mask_rejected() {
        let mut t = Tape::new();
        let logits = t.input(Tensor::zeros(vec![2, 4]));
        t.cross_entropy(logits, Rc::new(vec![0, 0]), Rc::new(vec![0.0, 0.0]));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        // kernel=1, stride=1, identity weights
        let w = t.input(Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = t.input(Tensor::zeros(vec![2]));
        let y = t.conv1d(x, w, b, 1, 0);
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn conv1d_length_formula() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(vec![4, 1]));
        let w = t.input(Tensor::zeros(vec![3, 1, 1]));
        let b = t.input(Tensor::zeros(vec![1]));
        let y = t.conv1d(x, w, b, 2, 1);
        assert_eq!(t.value(y).shape(), &[2, 1]);
    }

    #[test]
    fn conv1d_matches_naive_sliding_window() {
        let _g = PrecisionGuard::new(Precision::F64);
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "conv-test");
        let (f, c_in, c_out, k, stride, pad) = (8, 3, 2, 3, 2, 1);
        let xv = Tensor::from_fn(vec![f, c_in], |_| rng.gen_range(-1.0..1.0));
        let wv = Tensor::from_fn(vec![k, c_in, c_out], |_| rng.gen_range(-1.0..1.0));
        let bv = Tensor::from_fn(vec![c_out], |_| rng.gen_range(-1.0..1.0));
        let mut t = Tape::new();
        let x = t.input(xv.clone());
        let w = t.input(wv.clone());
        let b = t.input(bv.clone());
        let y = t.conv1d(x, w, b, stride, pad);
        let f_out = (f + 2 * pad - k) / stride + 1;
        for tt in 0..f_out {
            for co in 0..c_out {
                let mut expect = bv.data()[co];
                for dt in 0..k {
                    let ti = (tt * stride + dt) as isize - pad as isize;
                    if ti < 0 || ti >= f as isize {
                        continue;
                    }
                    for ci in 0..c_in {
                        expect += xv.at2(ti as usize, ci)
                            * wv.data()[(dt * c_in + ci) * c_out + co];
                    }
                }
                assert_abs_diff_eq!(t.value(y).at2(tt, co), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn straight_through_forward_is_quantized_backward_is_identity() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut t = Tape::new();
        let z_hat = t.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]));
        let z = Tensor::from_vec(vec![3], vec![0.9, 2.2, 2.7]);
        let st = t.straight_through(z_hat, z.clone());
        assert_eq!(t.value(st), &z);
        let weights = t.input(Tensor::from_vec(vec![3], vec![2.0, -1.0, 0.5]));
        let prod = t.mul(st, weights);
        let loss = t.sum(prod);
        t.backward(loss);
        assert_eq!(t.grad(z_hat).unwrap().data(), &[2.0, -1.0, 0.5]);
    }

    #[test]
    fn diamond_graph_matches_analytic_chain_rule() {
        // z = x*y + x, with x reused along two paths:
        // dz/dx = y + 1, dz/dy = x
        let _g = PrecisionGuard::new(Precision::F64);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1], vec![3.0]));
        let y = t.leaf(Tensor::from_vec(vec![1], vec![5.0]));
        let xy = t.mul(x, y);
        let z = t.add(xy, x);
        let loss = t.sum(z);
        t.backward(loss);
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
        assert_eq!(t.grad(y).unwrap().item(), 3.0);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut t = Tape::new();
        let mask = Rc::new(AttnMask::new(
            2,
            3,
            vec![true, false, true, false, true, false],
        ));
        let x = t.input(Tensor::from_vec(vec![2, 3], vec![1.0, 99.0, 1.0, 0.0, 2.0, 7.0]));
        let y = t.masked_softmax(x, mask);
        assert_eq!(t.value(y).at2(0, 1), 0.0);
        assert_abs_diff_eq!(t.value(y).at2(0, 0), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(t.value(y).at2(0, 2), 0.5, epsilon = 1e-9);
        assert_eq!(t.value(y).at2(1, 1), 1.0);
    }

    #[test]
    fn param_grads_only_for_trainable() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1], vec![2.0]), true);
        let frozen = store.add("frozen", Tensor::from_vec(vec![1], vec![4.0]), false);
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let fv = t.param(&store, frozen);
        let prod = t.mul(wv, fv);
        let loss = t.sum(prod);
        t.backward(loss);
        let grads = t.param_grads();
        assert!(grads.get(w).is_some());
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn embedding_gather_and_scatter() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut t = Tape::new();
        let table = t.leaf(Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = t.embedding(table, Rc::new(vec![2, 0, 2]));
        assert_eq!(t.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = t.sum(e);
        t.backward(loss);
        // row 2 hit twice, row 0 once, row 1 never
        assert_eq!(t.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = t.input(Tensor::full(vec![4], 1.0));
        let beta = t.input(Tensor::zeros(vec![4]));
        let y = t.layer_norm(x, gamma, beta);
        let row = t.value(y).row(0);
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        let var: f64 = row.iter().map(|&v| v * v).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }
}
