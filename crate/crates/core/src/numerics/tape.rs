//! Reverse-mode differentiation over a fixed op set.
//!
//! Forward calls record one node per op; `backward` replays the recording
//! in reverse, applying each op's hand-written vector-Jacobian product.
//! The op set is exactly what the matcher and its baselines need — this is
//! not a general graph engine.

use super::params::{ParamId, ParamStore};
use super::scalar::{normal_cdf, normal_pdf, Scalar};
use super::tensor::{matmul_into, Tensor};
use super::NumericsError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
pub struct ParamBindings {
    vars: Vec<Var>,
}

impl ParamBindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Probabilities fed to the binary cross-entropy are clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

enum Op<T: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    ScalarMul {
        x: Var,
        s: Var,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    ConcatCols {
        xs: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanAll {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    /// Saves the post-softmax weight matrix for the backward pass.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        weights: Tensor<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    BceLoss {
        p: Var,
        y: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; zero tensor semantics when the loss
    /// does not depend on `v` (returns `None`).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    fn accumulate(&mut self, v: Var, delta: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input with no parameter binding.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Record a trainable leaf bound to `id`; its gradient flows back into
    /// the store via [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// Bind every parameter of the store as a leaf, in registration order.
    pub fn bind_all(&mut self, store: &ParamStore<T>) -> ParamBindings {
        let vars = store.ids().map(|id| self.param(store, id)).collect();
        ParamBindings { vars }
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::InvalidShape(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::InvalidShape(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Row-broadcast bias add: `x[i, :] + b` for rank-2 `x` and rank-1 `b`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.rank() != 1 || tb.numel() != tx.cols() {
            return Err(NumericsError::InvalidShape(format!(
                "add_bias x {:?}, b {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let cols = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + tb.data()[i % cols];
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    /// Multiply every element of `x` by a single-element variable `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        if self.value(s).numel() != 1 {
            return Err(NumericsError::InvalidShape(format!(
                "scalar_mul scale has shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::ScalarMul { x, s }))
    }

    /// `x @ w + b`; bias optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let h = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(h, b),
            None => Ok(h),
        }
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::InvalidShape("concat of nothing".into()));
        }
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.cols() != cols {
                return Err(NumericsError::InvalidShape(format!(
                    "concat_rows column mismatch: {:?}",
                    t.shape()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::InvalidShape("concat of nothing".into()));
        }
        let rows = self.value(xs[0]).rows();
        let total_cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Tensor::zeros(vec![rows, total_cols]);
        let mut offset = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.rows() != rows {
                return Err(NumericsError::InvalidShape(format!(
                    "concat_cols row mismatch: {:?}",
                    t.shape()
                )));
            }
            let c = t.cols();
            for i in 0..rows {
                out.data_mut()[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(t.row(i));
            }
            offset += c;
        }
        Ok(self.push(out, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.rows() || len == 0 {
            return Err(NumericsError::InvalidShape(format!(
                "slice_rows [{start}, {start}+{len}) of {:?}",
                t.shape()
            )));
        }
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(vec![len, cols], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() || len == 0 {
            return Err(NumericsError::InvalidShape(format!(
                "slice_cols [{start}, {start}+{len}) of {:?}",
                t.shape()
            )));
        }
        let rows = t.rows();
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.data()[i * cols + start..i * cols + start + len]);
        }
        let out = Tensor::from_vec(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Mean over every element, producing a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::cast(t.numel() as f64);
        let sum: T = t.data().iter().copied().sum();
        self.push(Tensor::scalar(sum / n), Op::MeanAll { x })
    }

    /// Column-wise mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NumericsError::InvalidShape(format!(
                "mean_rows on {:?}",
                t.shape()
            )));
        }
        let (n, d) = (t.rows(), t.cols());
        let inv_n = T::cast(1.0 / n as f64);
        let mut data = vec![T::zero(); d];
        for i in 0..n {
            for (acc, &v) in data.iter_mut().zip(t.row(i)) {
                *acc = *acc + v;
            }
        }
        for v in &mut data {
            *v = *v * inv_n;
        }
        let out = Tensor::from_vec(vec![1, d], data)?;
        Ok(self.push(out, Op::MeanRows { x }))
    }

    /// Mean of single-element variables; used for batch loss reduction.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let mut acc = *xs
            .first()
            .ok_or_else(|| NumericsError::InvalidShape("mean of nothing".into()))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, T::cast(1.0 / xs.len() as f64)))
    }

    // ── nonlinearities ──────────────────────────────────────────────

    /// Max-subtracted softmax along `axis` (rank-1: axis 0; rank-2: 0 or 1).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (lanes, lane_len, stride, lane_stride) = softmax_layout(t.shape(), axis)?;
        let mut out = t.clone();
        for lane in 0..lanes {
            softmax_lane_in_place(out.data_mut(), lane * lane_stride, lane_len, stride);
        }
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    /// Exact Gaussian-CDF GELU: `x * Phi(x)` elementwise.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * normal_cdf(v));
        self.push(out, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp { x })
    }

    /// Elementwise clamp; gradient passes through inside `[lo, hi]` and is
    /// zero outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Per-row normalization over the last axis to zero mean / unit variance,
    /// then the affine `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let d = *t.shape().last().expect("tensor has rank >= 1");
        let tg = self.value(gamma);
        let tb = self.value(beta);
        if tg.rank() != 1 || tb.rank() != 1 || tg.numel() != d || tb.numel() != d {
            return Err(NumericsError::InvalidShape(format!(
                "layer_norm gamma {:?} / beta {:?} vs last axis {d}",
                tg.shape(),
                tb.shape()
            )));
        }
        let mut out = t.clone();
        let g = tg.data().to_vec();
        let b = tb.data().to_vec();
        for chunk in out.data_mut().chunks_mut(d) {
            let (mean, var) = mean_and_var(chunk);
            let inv_std = T::one() / (var + eps).sqrt();
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv_std) + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Scaled dot-product attention with a key mask.
    ///
    /// `softmax(q kᵀ / sqrt(d))  v` where masked keys get exactly zero
    /// weight. A row with no valid key has no defined distribution and is
    /// rejected.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 2 || tk.rank() != 2 || tv.rank() != 2 {
            return Err(NumericsError::InvalidShape("attention wants rank-2 q/k/v".into()));
        }
        let (n_q, d_k) = (tq.rows(), tq.cols());
        let (n_k, d_v) = (tv.rows(), tv.cols());
        if tk.cols() != d_k || tk.rows() != n_k || key_mask.len() != n_k {
            return Err(NumericsError::InvalidShape(format!(
                "attention q {:?}, k {:?}, v {:?}, mask {}",
                tq.shape(),
                tk.shape(),
                tv.shape(),
                key_mask.len()
            )));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(NumericsError::AllMaskedRow);
        }
        let scale = T::cast(1.0 / (d_k as f64).sqrt());

        // scores = q k^T / sqrt(d), then masked softmax per query row.
        let mut weights = Tensor::zeros(vec![n_q, n_k]);
        for i in 0..n_q {
            let q_row = tq.row(i);
            let mut max = T::neg_infinity();
            for j in 0..n_k {
                if !key_mask[j] {
                    continue;
                }
                let s = dot(q_row, tk.row(j)) * scale;
                weights.data_mut()[i * n_k + j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = T::zero();
            for j in 0..n_k {
                let w = &mut weights.data_mut()[i * n_k + j];
                if key_mask[j] {
                    *w = (*w - max).exp();
                    z = z + *w;
                } else {
                    *w = T::zero();
                }
            }
            for j in 0..n_k {
                let w = &mut weights.data_mut()[i * n_k + j];
                *w = *w / z;
            }
        }

        let mut out = Tensor::zeros(vec![n_q, d_v]);
        matmul_into(weights.data(), tv.data(), out.data_mut(), n_q, n_k, d_v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                mask: key_mask.to_vec(),
                weights,
            },
        ))
    }

    /// Gather rows of `table` by id; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(NumericsError::InvalidShape("embedding table must be rank 2".into()));
        }
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { index: id, bound: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Binary cross-entropy of a single probability against a binary label,
    /// with the probability clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, y: bool) -> Result<Var, NumericsError> {
        let t = self.value(p);
        if t.numel() != 1 {
            return Err(NumericsError::InvalidShape(format!(
                "bce_loss wants a single probability, got {:?}",
                t.shape()
            )));
        }
        let pc = clamp_prob(t.item());
        let loss = if y { -(pc.ln()) } else { -((T::one() - pc).ln()) };
        Ok(self.push(Tensor::scalar(loss), Op::BceLoss { p, y }))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        if t.rank() != 2 || targets.len() != t.rows() {
            return Err(NumericsError::InvalidShape(format!(
                "cross entropy logits {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        let cols = t.cols();
        let mut total = T::zero();
        for (i, &target) in targets.iter().enumerate() {
            if target >= cols {
                return Err(NumericsError::IndexOutOfRange { index: target, bound: cols });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            total = total + (z.ln() + max - row[target]);
        }
        let loss = total / T::cast(targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Scale each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(NumericsError::InvalidShape(format!(
                "l2_normalize_rows on {:?}",
                t.shape()
            )));
        }
        let mut out = t.clone();
        let d = out.cols();
        for chunk in out.data_mut().chunks_mut(d) {
            let norm = dot(chunk, chunk).sqrt();
            if norm < T::cast(1e-30) {
                return Err(NumericsError::DegenerateNorm);
            }
            for v in chunk.iter_mut() {
                *v = *v / norm;
            }
        }
        Ok(self.push(out, Op::L2NormalizeRows { x }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a single-element loss node. Returns per-node
    /// gradients; parameter leaves are pushed into a store with
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::InvalidShape(format!(
                "backward seed must be a single element, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
        };
        grads.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(d_out) = grads.grads[idx].clone() else {
                continue;
            };
            self.backward_op(idx, &d_out, &mut grads);
        }
        Ok(grads)
    }

    /// Add every bound parameter's gradient into the store (additive, per
    /// the accumulation convention).
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads.grads[idx].as_ref() {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }

    fn backward_op(&self, idx: usize, d_out: &Tensor<T>, grads: &mut Gradients<T>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}

            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC  B^T
                let bt = tb.transpose();
                let mut da = Tensor::zeros(vec![m, k]);
                matmul_into(d_out.data(), bt.data(), da.data_mut(), m, n, k);
                grads.accumulate(*a, da);
                // dB = A^T dC
                let at = ta.transpose();
                let mut db = Tensor::zeros(vec![k, n]);
                matmul_into(at.data(), d_out.data(), db.data_mut(), k, m, n);
                grads.accumulate(*b, db);
            }

            Op::Transpose { x } => {
                grads.accumulate(*x, d_out.transpose());
            }

            Op::Add { a, b } => {
                grads.accumulate(*a, d_out.clone());
                grads.accumulate(*b, d_out.clone());
            }

            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                grads.accumulate(*a, zip_mul(d_out, tb));
                grads.accumulate(*b, zip_mul(d_out, ta));
            }

            Op::Scale { x, c } => {
                grads.accumulate(*x, d_out.map(|v| v * *c));
            }

            Op::AddBias { x, b } => {
                grads.accumulate(*x, d_out.clone());
                let cols = d_out.cols();
                let mut db = vec![T::zero(); cols];
                for (i, &v) in d_out.data().iter().enumerate() {
                    db[i % cols] = db[i % cols] + v;
                }
                grads.accumulate(*b, Tensor::from_vec(vec![cols], db).expect("bias grad"));
            }

            Op::ScalarMul { x, s } => {
                let sv = self.value(*s).item();
                grads.accumulate(*x, d_out.map(|v| v * sv));
                let ds = dot(d_out.data(), self.value(*x).data());
                let mut g = Tensor::zeros(self.value(*s).shape().to_vec());
                g.data_mut()[0] = ds;
                grads.accumulate(*s, g);
            }

            Op::ConcatRows { xs } => {
                let cols = d_out.cols();
                let mut offset = 0;
                for &x in xs {
                    let r = self.value(x).rows();
                    let data = d_out.data()[offset * cols..(offset + r) * cols].to_vec();
                    grads.accumulate(x, Tensor::from_vec(vec![r, cols], data).expect("split"));
                    offset += r;
                }
            }

            Op::ConcatCols { xs } => {
                let rows = d_out.rows();
                let total = d_out.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        data.extend_from_slice(
                            &d_out.data()[i * total + offset..i * total + offset + c],
                        );
                    }
                    grads.accumulate(x, Tensor::from_vec(vec![rows, c], data).expect("split"));
                    offset += c;
                }
            }

            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let cols = t.cols();
                let mut dx = Tensor::zeros(t.shape().to_vec());
                let begin = start * cols;
                dx.data_mut()[begin..begin + d_out.numel()].copy_from_slice(d_out.data());
                grads.accumulate(*x, dx);
            }

            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let (rows, cols) = (t.rows(), t.cols());
                let len = d_out.cols();
                let mut dx = Tensor::zeros(vec![rows, cols]);
                for i in 0..rows {
                    dx.data_mut()[i * cols + start..i * cols + start + len]
                        .copy_from_slice(d_out.row(i));
                }
                grads.accumulate(*x, dx);
            }

            Op::MeanAll { x } => {
                let t = self.value(*x);
                let g = d_out.item() / T::cast(t.numel() as f64);
                grads.accumulate(*x, Tensor::full(t.shape().to_vec(), g));
            }

            Op::MeanRows { x } => {
                let t = self.value(*x);
                let (n, d) = (t.rows(), t.cols());
                let inv_n = T::cast(1.0 / n as f64);
                let mut dx = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = d_out.data()[j] * inv_n;
                    }
                }
                grads.accumulate(*x, dx);
            }

            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (lanes, lane_len, stride, lane_stride) =
                    softmax_layout(y.shape(), *axis).expect("validated at forward");
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for lane in 0..lanes {
                    let base = lane * lane_stride;
                    let mut inner = T::zero();
                    for j in 0..lane_len {
                        let p = base + j * stride;
                        inner = inner + y.data()[p] * d_out.data()[p];
                    }
                    for j in 0..lane_len {
                        let p = base + j * stride;
                        dx.data_mut()[p] = y.data()[p] * (d_out.data()[p] - inner);
                    }
                }
                grads.accumulate(*x, dx);
            }

            Op::Gelu { x } => {
                // d/dx [x Phi(x)] = Phi(x) + x phi(x)
                let t = self.value(*x);
                let mut dx = d_out.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(t.data()) {
                    *g = *g * (normal_cdf(v) + v * normal_pdf(v));
                }
                grads.accumulate(*x, dx);
            }

            Op::Sigmoid { x } => {
                let y = &node.value;
                let mut dx = d_out.clone();
                for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g = *g * s * (T::one() - s);
                }
                grads.accumulate(*x, dx);
            }

            Op::Exp { x } => {
                grads.accumulate(*x, zip_mul(d_out, &node.value));
            }

            Op::Clamp { x, lo, hi } => {
                let t = self.value(*x);
                let mut dx = d_out.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(t.data()) {
                    if v < *lo || v > *hi {
                        *g = T::zero();
                    }
                }
                grads.accumulate(*x, dx);
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let t = self.value(*x);
                let tg = self.value(*gamma);
                let d = tg.numel();
                let inv_d = T::cast(1.0 / d as f64);
                let mut dx = Tensor::zeros(t.shape().to_vec());
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let lanes = t.numel() / d;
                for lane in 0..lanes {
                    let base = lane * d;
                    let chunk = &t.data()[base..base + d];
                    let (mean, var) = mean_and_var(chunk);
                    let inv_std = T::one() / (var + *eps).sqrt();
                    // dxhat, plus the gamma/beta reductions.
                    let mut dxhat = vec![T::zero(); d];
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (chunk[j] - mean) * inv_std;
                        let dy = d_out.data()[base + j];
                        dgamma[j] = dgamma[j] + dy * xhat;
                        dbeta[j] = dbeta[j] + dy;
                        let dxh = dy * tg.data()[j];
                        dxhat[j] = dxh;
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat;
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    for j in 0..d {
                        let xhat = (chunk[j] - mean) * inv_std;
                        dx.data_mut()[base + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                grads.accumulate(*x, dx);
                grads.accumulate(*gamma, Tensor::from_vec(vec![d], dgamma).expect("dgamma"));
                grads.accumulate(*beta, Tensor::from_vec(vec![d], dbeta).expect("dbeta"));
            }

            Op::Attention { q, k, v, mask, weights } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n_q, d_k) = (tq.rows(), tq.cols());
                let (n_k, d_v) = (tv.rows(), tv.cols());
                let scale = T::cast(1.0 / (d_k as f64).sqrt());

                // dV = A^T dO
                let at = weights.transpose();
                let mut dv = Tensor::zeros(vec![n_k, d_v]);
                matmul_into(at.data(), d_out.data(), dv.data_mut(), n_k, n_q, d_v);
                grads.accumulate(*v, dv);

                // dA = dO V^T, then masked softmax VJP row by row.
                let vt = tv.transpose();
                let mut da = Tensor::zeros(vec![n_q, n_k]);
                matmul_into(d_out.data(), vt.data(), da.data_mut(), n_q, d_v, n_k);
                let mut ds = Tensor::zeros(vec![n_q, n_k]);
                for i in 0..n_q {
                    let mut inner = T::zero();
                    for j in 0..n_k {
                        inner = inner + da.data()[i * n_k + j] * weights.data()[i * n_k + j];
                    }
                    for j in 0..n_k {
                        if mask[j] {
                            let w = weights.data()[i * n_k + j];
                            ds.data_mut()[i * n_k + j] =
                                w * (da.data()[i * n_k + j] - inner) * scale;
                        }
                    }
                }

                // dQ = dS K, dK = dS^T Q (scale already folded into dS).
                let mut dq = Tensor::zeros(vec![n_q, d_k]);
                matmul_into(ds.data(), tk.data(), dq.data_mut(), n_q, n_k, d_k);
                grads.accumulate(*q, dq);
                let dst = ds.transpose();
                let mut dk = Tensor::zeros(vec![n_k, d_k]);
                matmul_into(dst.data(), tq.data(), dk.data_mut(), n_k, n_q, d_k);
                grads.accumulate(*k, dk);
            }

            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = Tensor::zeros(t.shape().to_vec());
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        let p = id * d + j;
                        dt.data_mut()[p] = dt.data_mut()[p] + d_out.data()[row * d + j];
                    }
                }
                grads.accumulate(*table, dt);
            }

            Op::BceLoss { p, y } => {
                let pv = self.value(*p).item();
                let pc = clamp_prob(pv);
                // Zero gradient where the clamp is active.
                let g = if pv < T::cast(BCE_CLAMP) || pv > T::one() - T::cast(BCE_CLAMP) {
                    T::zero()
                } else {
                    let yv = if *y { T::one() } else { T::zero() };
                    (pc - yv) / (pc * (T::one() - pc))
                };
                let mut dp = Tensor::zeros(self.value(*p).shape().to_vec());
                dp.data_mut()[0] = d_out.item() * g;
                grads.accumulate(*p, dp);
            }

            Op::SoftmaxCrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let (n, cols) = (t.rows(), t.cols());
                let inv_n = T::cast(1.0 / n as f64);
                let seed = d_out.item();
                let mut dl = Tensor::zeros(vec![n, cols]);
                for (i, &target) in targets.iter().enumerate() {
                    let row = t.row(i);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..cols {
                        let p = (row[j] - max).exp() / z;
                        let delta = if j == target { T::one() } else { T::zero() };
                        dl.data_mut()[i * cols + j] = seed * (p - delta) * inv_n;
                    }
                }
                grads.accumulate(*logits, dl);
            }

            Op::L2NormalizeRows { x } => {
                let t = self.value(*x);
                let y = &node.value;
                let (n, d) = (t.rows(), t.cols());
                let mut dx = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    let xr = t.row(i);
                    let ur = y.row(i);
                    let norm = dot(xr, xr).sqrt();
                    let proj = dot(ur, d_out.row(i));
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = (d_out.row(i)[j] - ur[j] * proj) / norm;
                    }
                }
                grads.accumulate(*x, dx);
            }
        }
    }
}

// ── helpers ─────────────────────────────────────────────────────────

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

fn zip_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("zip_mul shape")
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::cast(BCE_CLAMP);
    p.max(lo).min(T::one() - lo)
}

/// Population mean and variance of a lane.
fn mean_and_var<T: Scalar>(chunk: &[T]) -> (T, T) {
    let n = T::cast(chunk.len() as f64);
    let mean = chunk.iter().copied().sum::<T>() / n;
    let var = chunk
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / n;
    (mean, var)
}

/// (lanes, lane_len, stride within lane, stride between lanes) for softmax
/// over `axis` of a rank-1 or rank-2 shape.
fn softmax_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, usize), NumericsError> {
    match (shape.len(), axis) {
        (1, 0) => Ok((1, shape[0], 1, 0)),
        (2, 0) => Ok((shape[1], shape[0], shape[1], 1)),
        (2, 1) => Ok((shape[0], shape[1], 1, shape[1])),
        _ => Err(NumericsError::InvalidShape(format!(
            "softmax axis {axis} on {shape:?}"
        ))),
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Evaluate through exp of a negative argument only, for stability.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_lane_in_place<T: Scalar>(data: &mut [T], base: usize, len: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for j in 0..len {
        max = max.max(data[base + j * stride]);
    }
    let mut z = T::zero();
    for j in 0..len {
        let v = (data[base + j * stride] - max).exp();
        data[base + j * stride] = v;
        z = z + v;
    }
    for j in 0..len {
        data[base + j * stride] = data[base + j * stride] / z;
    }
}
