//! Reverse-mode automatic differentiation over a append-only tape.
//!
//! Each operation appends a node holding its output value; `backward` walks
//! the tape in reverse creation order (which is a topological order by
//! construction) accumulating gradients into every node that transitively
//! depends on a tracked leaf. Nodes that do not need gradients are skipped,
//! so constants (masks, teacher logits) cost nothing at backward time.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Nid(usize);

enum Op<T> {
    Leaf,
    Add(Nid, Nid),
    /// `[m,n] + [n]` broadcast over rows.
    AddRowVec(Nid, Nid),
    Mul(Nid, Nid),
    MulScalar(Nid, f64),
    Matmul(Nid, Nid),
    Transpose(Nid),
    SoftmaxRows(Nid),
    LayerNorm {
        x: Nid,
        gamma: Nid,
        beta: Nid,
        /// Per-row (mean, 1/std) cached from the forward pass.
        cache: Vec<(T, T)>,
    },
    Gelu(Nid),
    /// Output row `i` is `src` row `indices[i]`; duplicates allowed.
    GatherRows {
        src: Nid,
        indices: Vec<usize>,
    },
    SliceRows {
        src: Nid,
        start: usize,
    },
    SliceCols {
        src: Nid,
        start: usize,
    },
    ConcatRows(Vec<Nid>),
    ConcatCols(Vec<Nid>),
    /// Mean over the batch of `-ln softmax(logits)[target]`.
    CrossEntropy {
        logits: Nid,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    /// Mean over all elements of `(a - b)^2`.
    Mse(Nid, Nid),
    /// Fused multi-head self-attention over a packed batch `[B*len, d]`,
    /// masking pad keys per item. Attention probabilities are cached per
    /// (item, head) for the backward pass.
    SelfAttention {
        q: Nid,
        k: Nid,
        v: Nid,
        n_heads: usize,
        len: usize,
        attn_lens: Vec<usize>,
        probs: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. Create one per training step.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

use super::{par_zip_map, PAR_ELEMWISE_THRESHOLD};

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Nid {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Nid(self.nodes.len() - 1)
    }

    fn needs(&self, id: Nid) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Tracked leaf: gradients will be accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Nid {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf: treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Nid {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: Nid) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: Nid) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn add(&mut self, a: Nid, b: Nid) -> Result<Nid> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn add_row_vec(&mut self, a: Nid, v: Nid) -> Result<Nid> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        if self.value(v).len() != n {
            return Err(Error::shape(
                "add_row_vec",
                self.value(a).shape(),
                self.value(v).shape(),
            ));
        }
        let mut out = self.value(a).clone();
        {
            let vec = self.value(v).as_slice().to_vec();
            let data = out.as_mut_slice();
            let apply = |block: &mut [T]| {
                for row in block.chunks_mut(n) {
                    for (o, &x) in row.iter_mut().zip(&vec) {
                        *o = *o + x;
                    }
                }
            };
            if m * n >= PAR_ELEMWISE_THRESHOLD {
                use rayon::prelude::*;
                // Blocks of whole rows, large enough to amortize dispatch.
                data.par_chunks_mut(n * 64).for_each(apply);
            } else {
                apply(data);
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(out, Op::AddRowVec(a, v), needs))
    }

    pub fn mul(&mut self, a: Nid, b: Nid) -> Result<Nid> {
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn mul_scalar(&mut self, a: Nid, c: f64) -> Nid {
        let value = self.value(a).scale(T::from_f64(c));
        let needs = self.needs(a);
        self.push(value, Op::MulScalar(a, c), needs)
    }

    pub fn matmul(&mut self, a: Nid, b: Nid) -> Result<Nid> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Nid) -> Result<Nid> {
        let value = self.value(a).transpose()?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), needs))
    }

    pub fn softmax_rows(&mut self, a: Nid) -> Nid {
        let value = self.value(a).softmax_rows();
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Nid, gamma: Nid, beta: Nid, eps: f64) -> Result<Nid> {
        let n = self.value(x).cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape(
                "layer_norm",
                self.value(x).shape(),
                self.value(gamma).shape(),
            ));
        }
        let m = self.value(x).rows();
        let nf = T::from_f64(n as f64);
        let epsf = T::from_f64(eps);
        let mut out = self.value(x).clone();
        let mut cache = Vec::with_capacity(m);
        {
            let gamma_v = self.value(gamma).as_slice().to_vec();
            let beta_v = self.value(beta).as_slice().to_vec();
            for i in 0..m {
                let row = out.row_mut(i);
                let mean = row.iter().cloned().sum::<T>() / nf;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    / nf;
                let rstd = T::one() / (var + epsf).sqrt();
                cache.push((mean, rstd));
                for (v, (&g, &b)) in row.iter_mut().zip(gamma_v.iter().zip(beta_v.iter())) {
                    *v = (*v - mean) * rstd * g + b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            needs,
        ))
    }

    /// Tanh-approximation GELU, computed in the element's native precision.
    pub fn gelu(&mut self, a: Nid) -> Nid {
        let c = T::from_f64(GELU_C);
        let aa = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let one = T::one();
        let value = self.value(a).map(|x| {
            let u = c * (x + aa * x * x * x);
            half * x * (one + u.activation_tanh())
        });
        let needs = self.needs(a);
        self.push(value, Op::Gelu(a), needs)
    }

    pub fn gather_rows(&mut self, src: Nid, indices: &[usize]) -> Result<Nid> {
        let (m, n) = (self.value(src).rows(), self.value(src).cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidConfig(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.value(src).row(i));
        }
        let value = Tensor::new(vec![indices.len(), n], data)?;
        let needs = self.needs(src);
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&mut self, src: Nid, start: usize, len: usize) -> Result<Nid> {
        let (m, n) = (self.value(src).rows(), self.value(src).cols());
        if start + len > m {
            return Err(Error::InvalidConfig(format!(
                "slice_rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = self.value(src).as_slice()[start * n..(start + len) * n].to_vec();
        let value = Tensor::new(vec![len, n], data)?;
        let needs = self.needs(src);
        Ok(self.push(value, Op::SliceRows { src, start }, needs))
    }

    /// Contiguous column slice `[start, start+len)`.
    pub fn slice_cols(&mut self, src: Nid, start: usize, len: usize) -> Result<Nid> {
        let (m, n) = (self.value(src).rows(), self.value(src).cols());
        if start + len > n {
            return Err(Error::InvalidConfig(format!(
                "slice_cols {start}..{} out of range for {n} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.value(src).row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        let needs = self.needs(src);
        Ok(self.push(value, Op::SliceCols { src, start }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Nid]) -> Result<Nid> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of zero parts".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            m += self.value(p).rows();
            data.extend_from_slice(self.value(p).as_slice());
        }
        let value = Tensor::new(vec![m, n], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Nid]) -> Result<Nid> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                if self.value(p).rows() != m {
                    return Err(Error::shape(
                        "concat_cols",
                        self.value(parts[0]).shape(),
                        self.value(p).shape(),
                    ));
                }
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Mean cross-entropy of `logits` `[B,K]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Nid, targets: &[usize]) -> Result<Nid> {
        let (b, k) = (self.value(logits).rows(), self.value(logits).cols());
        if targets.len() != b {
            return Err(Error::shape("cross_entropy", &[b, k], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let probs = self.value(logits).softmax_rows();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            loss = loss - probs.get(i, t).max(T::from_f64(f64::MIN_POSITIVE)).ln();
        }
        loss = loss / T::from_f64(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Fused scaled-dot-product multi-head self-attention.
    ///
    /// `q`, `k`, `v` are packed `[B*len, d]`; item `b` owns rows
    /// `b*len..(b+1)*len` of which the first `attn_lens[b]` are real. Keys at
    /// pad positions receive exactly zero attention. Items are processed in
    /// parallel; per-item arithmetic order is fixed, so results are
    /// deterministic.
    pub fn self_attention(
        &mut self,
        q: Nid,
        k: Nid,
        v: Nid,
        n_heads: usize,
        len: usize,
        attn_lens: &[usize],
    ) -> Result<Nid> {
        use rayon::prelude::*;
        let shape = self.value(q).shape().to_vec();
        if self.value(k).shape() != shape || self.value(v).shape() != shape {
            return Err(Error::shape("self_attention", &shape, self.value(k).shape()));
        }
        if shape.len() != 2 || shape[0] != attn_lens.len() * len {
            return Err(Error::shape(
                "self_attention batch",
                &shape,
                &[attn_lens.len() * len],
            ));
        }
        let d = shape[1];
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        if let Some(&bad) = attn_lens.iter().find(|&&a| a == 0 || a > len) {
            return Err(Error::InvalidConfig(format!(
                "attention length {bad} out of range for len {len}"
            )));
        }
        let dh = d / n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qv = self.value(q).as_slice();
        let kv = self.value(k).as_slice();
        let vv = self.value(v).as_slice();

        let per_item: Vec<(Vec<T>, Vec<Tensor<T>>)> = (0..attn_lens.len())
            .into_par_iter()
            .map(|bi| {
                let base = bi * len;
                let alen = attn_lens[bi];
                let mut out = vec![T::zero(); len * d];
                let mut probs_h = Vec::with_capacity(n_heads);
                for h in 0..n_heads {
                    let off = h * dh;
                    let mut probs = Tensor::zeros(&[len, len]);
                    for i in 0..len {
                        let qrow = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                        let prow = probs.row_mut(i);
                        let mut max = T::neg_infinity();
                        for (j, p) in prow.iter_mut().enumerate().take(alen) {
                            let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                            let mut dot = T::zero();
                            for (&a, &b) in qrow.iter().zip(krow) {
                                dot = dot + a * b;
                            }
                            let score = dot * scale;
                            *p = score;
                            max = max.max(score);
                        }
                        let mut sum = T::zero();
                        for p in prow.iter_mut().take(alen) {
                            *p = (*p - max).exp();
                            sum = sum + *p;
                        }
                        for p in prow.iter_mut().take(alen) {
                            *p = *p / sum;
                        }
                        // Pad keys stay exactly zero.
                        let orow = &mut out[i * d + off..i * d + off + dh];
                        for (j, &p) in probs.row(i).iter().enumerate().take(alen) {
                            let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o = *o + p * x;
                            }
                        }
                    }
                    probs_h.push(probs);
                }
                (out, probs_h)
            })
            .collect();

        let mut data = Vec::with_capacity(shape[0] * d);
        let mut probs = Vec::with_capacity(attn_lens.len() * n_heads);
        for (out, probs_h) in per_item {
            data.extend_from_slice(&out);
            probs.extend(probs_h);
        }
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            value,
            Op::SelfAttention {
                q,
                k,
                v,
                n_heads,
                len,
                attn_lens: attn_lens.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean squared error over all elements of two same-shaped tensors.
    pub fn mse(&mut self, a: Nid, b: Nid) -> Result<Nid> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mse",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let n = T::from_f64(self.value(a).len() as f64);
        let mut loss = T::zero();
        for (&x, &y) in self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
        {
            let d = x - y;
            loss = loss + d * d;
        }
        loss = loss / n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), needs))
    }

    fn accumulate(&mut self, id: Nid, delta: &Tensor<T>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                g.axpy(delta, T::one()).expect("gradient shape stable");
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Backpropagate from a scalar loss node. Gradients accumulate, so call
    /// once per tape (or zero by rebuilding the tape, as the trainers do).
    pub fn backward(&mut self, loss: Nid) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "backward on non-scalar node of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            // Ops read parent values immutably then accumulate; split borrows
            // by cloning the (small) op metadata handles up front.
            match &self.nodes[idx].op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                &Op::AddRowVec(a, v) => {
                    self.accumulate(a, &grad);
                    if self.needs(v) {
                        let n = grad.cols();
                        let mut col_sum = Tensor::zeros(self.nodes[v.0].value.shape());
                        for i in 0..grad.rows() {
                            for (s, &g) in col_sum.as_mut_slice().iter_mut().zip(grad.row(i)) {
                                *s = *s + g;
                            }
                        }
                        debug_assert_eq!(col_sum.len(), n);
                        self.accumulate(v, &col_sum);
                    }
                }
                &Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da = grad.mul(&self.nodes[b.0].value)?;
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db = grad.mul(&self.nodes[a.0].value)?;
                        self.accumulate(b, &db);
                    }
                }
                &Op::MulScalar(a, c) => {
                    let da = grad.scale(T::from_f64(c));
                    self.accumulate(a, &da);
                }
                &Op::Matmul(a, b) => {
                    if self.needs(a) {
                        let bt = self.nodes[b.0].value.transpose()?;
                        let da = grad.matmul(&bt)?;
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let at = self.nodes[a.0].value.transpose()?;
                        let db = at.matmul(&grad)?;
                        self.accumulate(b, &db);
                    }
                }
                &Op::Transpose(a) => {
                    let da = grad.transpose()?;
                    self.accumulate(a, &da);
                }
                &Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let n = y.cols();
                    let mut da = grad.clone();
                    for i in 0..y.rows() {
                        let dot: T = y
                            .row(i)
                            .iter()
                            .zip(grad.row(i))
                            .map(|(&yv, &gv)| yv * gv)
                            .sum();
                        let da_row = &mut da.as_mut_slice()[i * n..(i + 1) * n];
                        for (d, &yv) in da_row.iter_mut().zip(y.row(i)) {
                            *d = yv * (*d - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let cache = cache.clone();
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gamma.0].value.clone();
                    let (m, n) = (xv.rows(), xv.cols());
                    let nf = T::from_f64(n as f64);
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dgamma = Tensor::zeros(gv.shape());
                    let mut dbeta = Tensor::zeros(gv.shape());
                    for i in 0..m {
                        let (mean, rstd) = cache[i];
                        let xr = xv.row(i);
                        let gr = grad.row(i);
                        // x_hat, then the three reduction terms.
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        let mut dxhat = vec![T::zero(); n];
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * rstd;
                            let d = gr[j] * gv.as_slice()[j];
                            dxhat[j] = d;
                            sum_dxhat = sum_dxhat + d;
                            sum_dxhat_xhat = sum_dxhat_xhat + d * xhat;
                            dgamma.as_mut_slice()[j] = dgamma.as_mut_slice()[j] + gr[j] * xhat;
                            dbeta.as_mut_slice()[j] = dbeta.as_mut_slice()[j] + gr[j];
                        }
                        let dxr = dx.row_mut(i);
                        for j in 0..n {
                            let xhat = (xr[j] - mean) * rstd;
                            dxr[j] = rstd
                                * (dxhat[j] - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                &Op::Gelu(a) => {
                    let c = T::from_f64(GELU_C);
                    let aa = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let one = T::one();
                    let three = T::from_f64(3.0);
                    let xv = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(xv.shape());
                    par_zip_map(
                        grad.as_slice(),
                        xv.as_slice(),
                        da.as_mut_slice(),
                        |g, x| {
                            let u = c * (x + aa * x * x * x);
                            let t = u.activation_tanh();
                            let sech2 = one - t * t;
                            let du = c * (one + three * aa * x * x);
                            let dy = half * (one + t) + half * x * sech2 * du;
                            g * dy
                        },
                    );
                    self.accumulate(a, &da);
                }
                Op::GatherRows { src, indices } => {
                    let (src, indices) = (*src, indices.clone());
                    let mut da = Tensor::zeros(self.nodes[src.0].value.shape());
                    let n = grad.cols();
                    for (out_i, &src_i) in indices.iter().enumerate() {
                        let dst = da.row_mut(src_i);
                        for (d, &g) in dst.iter_mut().zip(grad.row(out_i)) {
                            *d = *d + g;
                        }
                        let _ = n;
                    }
                    self.accumulate(src, &da);
                }
                &Op::SliceRows { src, start } => {
                    let mut da = Tensor::zeros(self.nodes[src.0].value.shape());
                    for i in 0..grad.rows() {
                        let dst = da.row_mut(start + i);
                        for (d, &g) in dst.iter_mut().zip(grad.row(i)) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(src, &da);
                }
                &Op::SliceCols { src, start } => {
                    let mut da = Tensor::zeros(self.nodes[src.0].value.shape());
                    let len = grad.cols();
                    for i in 0..grad.rows() {
                        let dst = &mut da.row_mut(i)[start..start + len];
                        for (d, &g) in dst.iter_mut().zip(grad.row(i)) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(src, &da);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let n = grad.cols();
                        let slice =
                            grad.as_slice()[offset * n..(offset + rows) * n].to_vec();
                        let dp = Tensor::new(vec![rows, n], slice)?;
                        self.accumulate(p, &dp);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let m = grad.rows();
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.cols();
                        let mut data = Vec::with_capacity(m * cols);
                        for i in 0..m {
                            data.extend_from_slice(&grad.row(i)[offset..offset + cols]);
                        }
                        let dp = Tensor::new(vec![m, cols], data)?;
                        self.accumulate(p, &dp);
                        offset += cols;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (logits, targets, probs) = (*logits, targets.clone(), probs.clone());
                    let scale = grad.item() / T::from_f64(targets.len() as f64);
                    let mut da = probs;
                    for (i, &t) in targets.iter().enumerate() {
                        da.row_mut(i)[t] = da.row(i)[t] - T::one();
                    }
                    let da = da.scale(scale);
                    self.accumulate(logits, &da);
                }
                &Op::Mse(a, b) => {
                    let scale = grad.item()
                        * T::from_f64(2.0 / self.nodes[a.0].value.len() as f64);
                    let diff = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
                    if self.needs(a) {
                        self.accumulate(a, &diff.scale(scale));
                    }
                    if self.needs(b) {
                        self.accumulate(b, &diff.scale(T::zero() - scale));
                    }
                }
                Op::SelfAttention {
                    q,
                    k,
                    v,
                    n_heads,
                    len,
                    attn_lens,
                    probs,
                } => {
                    use rayon::prelude::*;
                    let (q, k, v, n_heads, len) = (*q, *k, *v, *n_heads, *len);
                    let attn_lens = attn_lens.clone();
                    let probs = probs.clone();
                    let qv = self.nodes[q.0].value.clone();
                    let kv = self.nodes[k.0].value.clone();
                    let vv = self.nodes[v.0].value.clone();
                    let d = qv.cols();
                    let dh = d / n_heads;
                    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..attn_lens.len())
                        .into_par_iter()
                        .map(|bi| {
                            let base = bi * len;
                            let alen = attn_lens[bi];
                            let mut dq = vec![T::zero(); len * d];
                            let mut dk = vec![T::zero(); len * d];
                            let mut dv = vec![T::zero(); len * d];
                            let mut dp = vec![T::zero(); len];
                            for h in 0..n_heads {
                                let off = h * dh;
                                let p = &probs[bi * n_heads + h];
                                for i in 0..len {
                                    let dctx = &grad.as_slice()
                                        [(base + i) * d + off..(base + i) * d + off + dh];
                                    let prow = p.row(i);
                                    // dV and dP.
                                    let mut dot_sum = T::zero();
                                    for j in 0..alen {
                                        let vrow = &vv.as_slice()
                                            [(base + j) * d + off..(base + j) * d + off + dh];
                                        let mut dpij = T::zero();
                                        for (&g, &x) in dctx.iter().zip(vrow) {
                                            dpij = dpij + g * x;
                                        }
                                        dp[j] = dpij;
                                        dot_sum = dot_sum + dpij * prow[j];
                                        let dvrow =
                                            &mut dv[j * d + off..j * d + off + dh];
                                        let pij = prow[j];
                                        for (o, &g) in dvrow.iter_mut().zip(dctx) {
                                            *o = *o + pij * g;
                                        }
                                    }
                                    // Softmax backward, then into dq/dk.
                                    let dqrow_base = i * d + off;
                                    for j in 0..alen {
                                        let ds = prow[j] * (dp[j] - dot_sum) * scale;
                                        if ds == T::zero() {
                                            continue;
                                        }
                                        let krow = &kv.as_slice()
                                            [(base + j) * d + off..(base + j) * d + off + dh];
                                        for (o, &x) in dq[dqrow_base..dqrow_base + dh]
                                            .iter_mut()
                                            .zip(krow)
                                        {
                                            *o = *o + ds * x;
                                        }
                                        let qrow = &qv.as_slice()
                                            [(base + i) * d + off..(base + i) * d + off + dh];
                                        let dkrow =
                                            &mut dk[j * d + off..j * d + off + dh];
                                        for (o, &x) in dkrow.iter_mut().zip(qrow) {
                                            *o = *o + ds * x;
                                        }
                                    }
                                }
                            }
                            (dq, dk, dv)
                        })
                        .collect();
                    let assemble = |pick: fn(&(Vec<T>, Vec<T>, Vec<T>)) -> &Vec<T>| {
                        let mut data = Vec::with_capacity(qv.len());
                        for item in &per_item {
                            data.extend_from_slice(pick(item));
                        }
                        Tensor::new(qv.shape().to_vec(), data).expect("attention grad shape")
                    };
                    if self.needs(q) {
                        let dq = assemble(|t| &t.0);
                        self.accumulate(q, &dq);
                    }
                    if self.needs(k) {
                        let dk = assemble(|t| &t.1);
                        self.accumulate(k, &dk);
                    }
                    if self.needs(v) {
                        let dv = assemble(|t| &t.2);
                        self.accumulate(v, &dv);
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar function of one tensor entry.
    fn finite_diff(
        f: &mut impl FnMut(&Tensor<f64>) -> f64,
        at: &Tensor<f64>,
        flat_idx: usize,
    ) -> f64 {
        let h = 1e-5 * at.as_slice()[flat_idx].abs().max(1.0);
        let mut plus = at.clone();
        plus.as_mut_slice()[flat_idx] += h;
        let mut minus = at.clone();
        minus.as_mut_slice()[flat_idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn square_derivative() {
        // d/dx (x*x) at x = 3 is 6.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(c, c).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One composite expression touching matmul, add_row_vec, gelu,
        // layer_norm, softmax, slices, concat, mul, cross-entropy and mse.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = Tensor::<f64>::randn(&[3, 4], 0.8, &mut rng);
        let w0 = Tensor::<f64>::randn(&[4, 6], 0.8, &mut rng);
        let b0 = Tensor::<f64>::randn(&[6], 0.5, &mut rng);
        let g0 = Tensor::<f64>::randn(&[6], 0.3, &mut rng).map(|x| x + 1.0);
        let be0 = Tensor::<f64>::randn(&[6], 0.3, &mut rng);
        let t0 = Tensor::<f64>::randn(&[3, 3], 0.7, &mut rng);

        let run = |a: &Tensor<f64>,
                   w: &Tensor<f64>,
                   b: &Tensor<f64>,
                   ga: &Tensor<f64>,
                   be: &Tensor<f64>,
                   tg: &Tensor<f64>|
         -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::<f64>::new();
            let an = g.param(a.clone());
            let wn = g.param(w.clone());
            let bn = g.param(b.clone());
            let gn = g.param(ga.clone());
            let ben = g.param(be.clone());
            let tn = g.param(tg.clone());
            let h = g.matmul(an, wn).unwrap();
            let h = g.add_row_vec(h, bn).unwrap();
            let h = g.gelu(h);
            let h = g.layer_norm(h, gn, ben, 1e-5).unwrap();
            let left = g.slice_cols(h, 0, 3).unwrap();
            let right = g.slice_cols(h, 3, 3).unwrap();
            let mixed = g.mul(left, right).unwrap();
            let top = g.slice_rows(mixed, 0, 2).unwrap();
            let bottom = g.slice_rows(mixed, 2, 1).unwrap();
            let joined = g.concat_rows(&[top, bottom]).unwrap();
            let gathered = g.gather_rows(joined, &[2, 0, 1, 0]).unwrap();
            let wide = g.concat_cols(&[joined, joined]).unwrap();
            let probs_in = g.mul_scalar(wide, 0.5);
            let sm = g.softmax_rows(probs_in);
            let narrowed = g.slice_cols(sm, 1, 3).unwrap();
            let tr = g.transpose(tn).unwrap();
            let scores = g.matmul(narrowed, tr).unwrap();
            let ce = g.cross_entropy(scores, &[0, 2, 1]).unwrap();
            let m1 = g.slice_rows(gathered, 0, 2).unwrap();
            let m2 = g.slice_rows(gathered, 2, 2).unwrap();
            let mse = g.mse(m1, m2).unwrap();
            let ce_s = g.mul_scalar(ce, 0.7);
            let mse_s = g.mul_scalar(mse, 0.3);
            let loss = g.add(ce_s, mse_s).unwrap();
            g.backward(loss).unwrap();
            let grads = vec![
                g.grad(an).unwrap().clone(),
                g.grad(wn).unwrap().clone(),
                g.grad(bn).unwrap().clone(),
                g.grad(gn).unwrap().clone(),
                g.grad(ben).unwrap().clone(),
                g.grad(tn).unwrap().clone(),
            ];
            (g.value(loss).item(), grads)
        };

        let (_, grads) = run(&a0, &w0, &b0, &g0, &be0, &t0);
        let inputs = [&a0, &w0, &b0, &g0, &be0, &t0];
        for (which, base) in inputs.iter().enumerate() {
            for idx in 0..base.len() {
                let mut f = |t: &Tensor<f64>| {
                    let mut args: Vec<Tensor<f64>> =
                        inputs.iter().map(|t| (*t).clone()).collect();
                    args[which] = t.clone();
                    run(&args[0], &args[1], &args[2], &args[3], &args[4], &args[5]).0
                };
                let fd = finite_diff(&mut f, base, idx);
                let ad = grads[which].as_slice()[idx];
                assert!(
                    rel_err(ad, fd) < 1e-5,
                    "param {which} idx {idx}: ad={ad} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[2, 25]));
        let ce = g.cross_entropy(logits, &[3, 17]).unwrap();
        assert!((g.value(ce).item() - (25.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[1, 3]));
        assert!(g.cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_huge_margin_tends_to_zero() {
        let mut g = Graph::<f64>::new();
        let mut t = Tensor::<f64>::zeros(&[1, 4]);
        t.row_mut(0)[2] = 200.0;
        let logits = g.param(t);
        let ce = g.cross_entropy(logits, &[2]).unwrap();
        assert!(g.value(ce).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::randn(&[4, 3], 2.0, &mut rng);
        let golds = [2usize, 0, 1, 1];
        let mut g = Graph::<f64>::new();
        let l = g.param(logits.clone());
        let ce = g.cross_entropy(l, &golds).unwrap();
        // Brute-force per-element recomputation.
        let mut want = 0.0;
        for (i, &t) in golds.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            want -= (row[t] - max) - denom.ln();
        }
        want /= 4.0;
        assert!((g.value(ce).item() - want).abs() < 1e-10);
    }

    #[test]
    fn mse_basics_and_oracle() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = g.constant(Tensor::new(vec![1], vec![2.0]).unwrap());
        let loss = g.mse(x, y).unwrap();
        assert_eq!(g.value(loss).item(), 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let an = g.param(a.clone());
        let bn = g.constant(b.clone());
        let loss = g.mse(an, bn).unwrap();
        let want: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / 15.0;
        assert!((g.value(loss).item() - want).abs() < 1e-12);
        let same = g.mse(an, an).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn fused_attention_matches_composed_primitives() {
        // Build the same multi-head attention from slice/matmul/softmax
        // primitives and compare values and gradients against the fused op.
        let (batch, len, heads, d) = (2usize, 5usize, 2usize, 8usize);
        let dh = d / heads;
        let attn_lens = [5usize, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q0 = Tensor::<f64>::randn(&[batch * len, d], 0.7, &mut rng);
        let k0 = Tensor::<f64>::randn(&[batch * len, d], 0.7, &mut rng);
        let v0 = Tensor::<f64>::randn(&[batch * len, d], 0.7, &mut rng);

        // Fused route.
        let mut g = Graph::<f64>::new();
        let q = g.param(q0.clone());
        let k = g.param(k0.clone());
        let v = g.param(v0.clone());
        let fused = g.self_attention(q, k, v, heads, len, &attn_lens).unwrap();
        let target = g.constant(Tensor::zeros(&[batch * len, d]));
        let loss = g.mse(fused, target).unwrap();
        g.backward(loss).unwrap();
        let fused_value = g.value(fused).clone();
        let fused_grads = [
            g.grad(q).unwrap().clone(),
            g.grad(k).unwrap().clone(),
            g.grad(v).unwrap().clone(),
        ];

        // Composed route.
        let mut g = Graph::<f64>::new();
        let q = g.param(q0.clone());
        let k = g.param(k0.clone());
        let v = g.param(v0.clone());
        let mut items = Vec::new();
        for b in 0..batch {
            let qb = g.slice_rows(q, b * len, len).unwrap();
            let kb = g.slice_rows(k, b * len, len).unwrap();
            let vb = g.slice_rows(v, b * len, len).unwrap();
            let mask_data: Vec<f64> = (0..len)
                .map(|j| if j < attn_lens[b] { 0.0 } else { -1e9 })
                .collect();
            let mask = g.constant(Tensor::new(vec![len], mask_data).unwrap());
            let mut head_ctx = Vec::new();
            for h in 0..heads {
                let qh = g.slice_cols(qb, h * dh, dh).unwrap();
                let kh = g.slice_cols(kb, h * dh, dh).unwrap();
                let vh = g.slice_cols(vb, h * dh, dh).unwrap();
                let kt = g.transpose(kh).unwrap();
                let scores = g.matmul(qh, kt).unwrap();
                let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
                let scores = g.add_row_vec(scores, mask).unwrap();
                let probs = g.softmax_rows(scores);
                head_ctx.push(g.matmul(probs, vh).unwrap());
            }
            items.push(g.concat_cols(&head_ctx).unwrap());
        }
        let composed = g.concat_rows(&items).unwrap();
        let target = g.constant(Tensor::zeros(&[batch * len, d]));
        let loss = g.mse(composed, target).unwrap();
        g.backward(loss).unwrap();

        for (a, b) in fused_value
            .as_slice()
            .iter()
            .zip(g.value(composed).as_slice())
        {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (fused_grad, node) in fused_grads.iter().zip([q, k, v]) {
            for (a, b) in fused_grad
                .as_slice()
                .iter()
                .zip(g.grad(node).unwrap().as_slice())
            {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 64], 3.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let xn = g.param(x);
        let gamma = g.constant(Tensor::full(&[64], 1.0));
        let beta = g.constant(Tensor::zeros(&[64]));
        let y = g.layer_norm(xn, gamma, beta, 1e-12).unwrap();
        let row = g.value(y).row(0);
        // Two-pass oracle on the output.
        let mean: f64 = row.iter().sum::<f64>() / 64.0;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
}
