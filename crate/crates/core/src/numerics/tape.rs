//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order; `backward` walks them in exact
//! reverse. A leaf that feeds several operations (a shared layer applied on
//! every cycle) accumulates the sum of all its contributions.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};

use super::kernels;
use super::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Batch/sequence/head arrangement of the rows fed to [`Tape::attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    MatmulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulRows(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(T, T)>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        zero_key: Option<usize>,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Result of [`Tape::attention`].
pub struct AttentionOutput<T> {
    pub out: Var,
    /// Per query row: weight on the zero slot averaged over heads.
    pub zero_attn: Option<Vec<T>>,
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index as usize
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.val(self.idx(v))
    }

    /// Records an input tensor. Parameters and constants are both leaves; the
    /// caller decides which leaf gradients it reads.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Softmax probabilities saved by an attention node, laid out as
    /// `[batch, heads, seq, slots]` with masked slots set to zero.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[self.idx(v)].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (self.val(ia), self.val(ib));
        if vb.shape().len() != 2 {
            return Err(Error::dim(format!("matmul rhs must be 2-D, got {:?}", vb.shape())));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        if vb.shape()[0] != k {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} × {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(va.data(), vb.data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(ia, ib)))
    }

    /// `a · bᵀ` where `b` is `[n × k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (self.val(ia), self.val(ib));
        if vb.shape().len() != 2 || vb.cols() != va.cols() {
            return Err(Error::dim(format!(
                "matmul_nt extents differ: {:?} × {:?}ᵀ",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        let bt = kernels::transpose(vb.data(), n, k);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(va.data(), &bt, m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulNt(ia, ib)))
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.val(ia).shape(),
                self.val(ib).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib, "add")?;
        let va = self.val(ia);
        let data = va.data().iter().zip(self.val(ib).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    /// Adds a trailing-axis vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x), self.idx(bias));
        let (vx, vb) = (self.val(ix), self.val(ib));
        if vb.len() != vx.cols() {
            return Err(Error::dim(format!("bias of {} for rows of {}", vb.len(), vx.cols())));
        }
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(ix, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.same_shape(ia, ib, "mul")?;
        let va = self.val(ia);
        let data = va.data().iter().zip(self.val(ib).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    /// Multiplies row `r` of `x` by the scalar `s[r]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x), self.idx(s));
        let (vx, vs) = (self.val(ix), self.val(is));
        if vs.len() != vx.rows() {
            return Err(Error::dim(format!("{} row scales for {} rows", vs.len(), vx.rows())));
        }
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for (row, &sv) in data.chunks_mut(c).zip(vs.data()) {
            for o in row.iter_mut() {
                *o = *o * sv;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulRows(ix, is)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let ix = self.idx(x);
        let out = self.val(ix).map(|v| v * factor);
        self.push(out, Op::Scale(ix, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let s = kernels::sum(self.val(ix).data());
        self.push(Tensor::scalar(s), Op::Sum(ix))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = self.val(ix).map(kernels::gelu);
        self.push(out, Op::Gelu(ix))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let out = self.val(ix).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(ix))
    }

    /// Numerically stable softmax. Only the trailing axis is supported.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.value(x).shape().len().max(1);
        if axis + 1 != rank {
            return Err(Error::dim(format!("softmax over axis {axis} of a rank-{rank} tensor")));
        }
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax where row `r` only sees columns `0..min(cols, r + offset)`.
    /// Hidden columns get probability exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Result<Var> {
        self.softmax_impl(x, Some(offset))
    }

    fn softmax_impl(&mut self, x: Var, offset: Option<usize>) -> Result<Var> {
        let ix = self.idx(x);
        let vx = self.val(ix);
        let c = vx.cols();
        if c == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let mut data = vx.data().to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            let visible = offset.map_or(c, |o| (r + o).min(c));
            if visible == 0 {
                return Err(Error::dim(format!("softmax row {r} has no visible entries")));
            }
            kernels::softmax_in_place(&mut row[..visible]);
            row[visible..].fill(T::zero());
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(ix)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (vx, vg, vb) = (self.val(ix), self.val(ig), self.val(ib));
        let d = vx.cols();
        if d == 0 || vg.len() != d || vb.len() != d {
            return Err(Error::dim(format!(
                "layer_norm over {d} features with gamma {:?}, beta {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let mut data = vec![T::zero(); vx.len()];
        let mut stats = Vec::with_capacity(vx.rows());
        for (row, out) in vx.data().chunks(d).zip(data.chunks_mut(d)) {
            stats.push(kernels::layer_norm_row(row, vg.data(), vb.data(), eps, out));
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { x: ix, gamma: ig, beta: ib, stats }))
    }

    /// Gathers rows of a `[V × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table);
        let vt = self.val(it);
        if vt.shape().len() != 2 {
            return Err(Error::dim("embedding table must be 2-D"));
        }
        let (v, d) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding { table: it, ids: ids.to_vec() }))
    }

    /// Mean token-level negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits);
        let vl = self.val(il);
        let (n, v) = (vl.rows(), vl.cols());
        if targets.len() != n {
            return Err(Error::dim(format!("{} targets for {n} rows of logits", targets.len())));
        }
        if n == 0 {
            return Err(Error::dim("cross_entropy over zero positions"));
        }
        let mut probs = vl.data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::Index(format!("target {t} outside vocabulary of {v}")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z = z + *x;
            }
            // -log p_t = log z - (x_t - max), with row[t] = exp(x_t - max)
            total = total + (z.ln() - row[t].ln());
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let loss = total / T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs },
        ))
    }

    /// Causal multi-head attention over `[batch·seq × d]` projections.
    ///
    /// With `zero_key` (a `d`-vector split across heads), every query also
    /// sees a slot in front of position 0 whose key is that vector and whose
    /// value is zero. The slot is never masked.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        zero_key: Option<Var>,
        layout: AttentionLayout,
    ) -> Result<AttentionOutput<T>> {
        let (iq, ik, iv) = (self.idx(q), self.idx(k), self.idx(v));
        let iz = zero_key.map(|z| self.idx(z));
        let AttentionLayout { batch, seq, heads } = layout;
        let (vq, vk, vv) = (self.val(iq), self.val(ik), self.val(iv));
        let d = vq.cols();
        let rows = batch * seq;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("{d} features do not split into {heads} heads")));
        }
        for t in [vq, vk, vv] {
            if t.rows() != rows || t.cols() != d {
                return Err(Error::dim(format!(
                    "attention input {:?} does not match {rows}×{d}",
                    t.shape()
                )));
            }
        }
        let zk = match iz {
            Some(i) => {
                let z = self.val(i);
                if z.len() != d {
                    return Err(Error::dim(format!("zero key of {} for d_model {d}", z.len())));
                }
                Some(z.data())
            }
            None => None,
        };
        let dh = d / heads;
        let zslot = usize::from(zk.is_some());
        let slots = seq + zslot;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * slots];
        let mut out = vec![T::zero(); rows * d];
        let mut zero_attn = zk.map(|_| vec![T::zero(); rows]);
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut head_out = vec![T::zero(); dh];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                let key = |j: usize| &kd[(b * seq + j) * d + col..][..dh];
                let value = |j: usize| &vd[(b * seq + j) * d + col..][..dh];
                let zh = zk.map(|z| &z[col..col + dh]);
                for t in 0..seq {
                    let row = b * seq + t;
                    let q_row = &qd[row * d + col..][..dh];
                    let p_off = ((b * heads + h) * seq + t) * slots;
                    let p = &mut probs[p_off..p_off + zslot + t + 1];
                    kernels::attend_row(q_row, zh, t + 1, key, value, scale, p, &mut head_out);
                    out[row * d + col..][..dh].copy_from_slice(&head_out);
                }
            }
        }
        if let Some(za) = zero_attn.as_mut() {
            let inv_heads = T::one() / T::from_f64(heads as f64);
            for b in 0..batch {
                for t in 0..seq {
                    let mut s = T::zero();
                    for h in 0..heads {
                        s = s + probs[((b * heads + h) * seq + t) * slots];
                    }
                    za[b * seq + t] = s * inv_heads;
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let var = self.push(out, Op::Attention { q: iq, k: ik, v: iv, zero_key: iz, layout, probs });
        Ok(AttentionOutput { out: var, zero_attn })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id || loss.index() >= self.nodes.len() {
            return Err(Error::Usage("loss is not recorded on this tape".into()));
        }
        let root = loss.index();
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let bt = kernels::transpose(vb.data(), k, n);
                let mut da = vec![T::zero(); m * k];
                kernels::matmul(g, &bt, m, n, k, &mut da);
                add_into(slot(grads, a, m * k), &da);
                kernels::matmul_tn_acc(va.data(), g, m, k, n, slot(grads, b, k * n));
            }
            &Op::MatmulNt(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                let mut da = vec![T::zero(); m * k];
                kernels::matmul(g, vb.data(), m, n, k, &mut da);
                add_into(slot(grads, a, m * k), &da);
                kernels::matmul_tn_acc(g, va.data(), m, n, k, slot(grads, b, n * k));
            }
            &Op::Add(a, b) => {
                add_into(slot(grads, a, g.len()), g);
                add_into(slot(grads, b, g.len()), g);
            }
            &Op::AddRow(x, b) => {
                add_into(slot(grads, x, g.len()), g);
                let c = self.val(b).len();
                let gb = slot(grads, b, c);
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                let ga = slot(grads, a, g.len());
                for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *o = *o + gi * y;
                }
                let gb = slot(grads, b, g.len());
                for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(va) {
                    *o = *o + gi * x;
                }
            }
            &Op::MulRows(x, s) => {
                let (vx, vs) = (self.val(x), self.val(s));
                let c = vx.cols();
                let gx = slot(grads, x, g.len());
                for ((o, gr), &sv) in gx.chunks_mut(c).zip(g.chunks(c)).zip(vs.data()) {
                    for (oo, &gi) in o.iter_mut().zip(gr) {
                        *oo = *oo + gi * sv;
                    }
                }
                let gs = slot(grads, s, vs.len());
                for ((o, gr), xr) in gs.iter_mut().zip(g.chunks(c)).zip(vx.data().chunks(c)) {
                    *o = *o + kernels::dot(gr, xr);
                }
            }
            &Op::Scale(x, f) => {
                let gx = slot(grads, x, g.len());
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o = *o + gi * f;
                }
            }
            &Op::Sum(x) => {
                let gx = slot(grads, x, self.val(x).len());
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }
            &Op::Gelu(x) => {
                let vx = self.val(x).data();
                let gx = slot(grads, x, g.len());
                for ((o, &gi), &xv) in gx.iter_mut().zip(g).zip(vx) {
                    *o = *o + gi * kernels::gelu_grad(xv);
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = slot(grads, x, g.len());
                for ((o, &gi), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *o = *o + gi * yv * (T::one() - yv);
                }
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let gx = slot(grads, x, g.len());
                for ((o, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let s = kernels::dot(gr, yr);
                    for ((oo, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oo = *oo + yi * (gi - s);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let vx = self.val(x);
                let vg = self.val(gamma).data();
                let d = vx.cols();
                let inv_d = T::one() / T::from_f64(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); vx.len()];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (&(mean, rstd), xr)) in stats.iter().zip(vx.data().chunks(d)).enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * vg[j];
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    let mean_dxhat = kernels::sum(&dxhat) * inv_d;
                    let mean_dxhat_xhat = kernels::dot(&dxhat, &xhat) * inv_d;
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                add_into(slot(grads, x, dx.len()), &dx);
                add_into(slot(grads, gamma, d), &dgamma);
                add_into(slot(grads, beta, d), &dbeta);
            }
            Op::Embedding { table, ids } => {
                let vt = self.val(*table);
                let d = vt.cols();
                let gt = slot(grads, *table, vt.len());
                for (gr, &id) in g.chunks(d).zip(ids) {
                    add_into(&mut gt[id * d..(id + 1) * d], gr);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.val(*logits).cols();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let gl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let pr = &probs[r * v..(r + 1) * v];
                    let o = &mut gl[r * v..(r + 1) * v];
                    for (j, (oo, &p)) in o.iter_mut().zip(pr).enumerate() {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        *oo = *oo + (p - onehot) * scale;
                    }
                }
            }
            Op::Attention { q, k, v, zero_key, layout, probs } => {
                self.attention_backward(g, (*q, *k, *v, *zero_key), *layout, probs, grads);
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[T],
        (iq, ik, iv, iz): (usize, usize, usize, Option<usize>),
        layout: AttentionLayout,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttentionLayout { batch, seq, heads } = layout;
        let (qd, kd, vd) = (self.val(iq).data(), self.val(ik).data(), self.val(iv).data());
        let d = self.val(iq).cols();
        let dh = d / heads;
        let zslot = usize::from(iz.is_some());
        let slots = seq + zslot;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let zd = iz.map(|i| self.val(i).data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dz = vec![T::zero(); if iz.is_some() { d } else { 0 }];
        let mut dscore = vec![T::zero(); slots];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for t in 0..seq {
                    let row = b * seq + t;
                    let p_off = ((b * heads + h) * seq + t) * slots;
                    let n = zslot + t + 1;
                    let p = &probs[p_off..p_off + n];
                    let go = &g[row * d + col..][..dh];
                    // d(prob): the zero slot's value is zero
                    let ds = &mut dscore[..n];
                    if zslot == 1 {
                        ds[0] = T::zero();
                    }
                    for j in 0..=t {
                        let vr = (b * seq + j) * d + col;
                        ds[zslot + j] = kernels::dot(go, &vd[vr..vr + dh]);
                        let dvr = &mut dv[vr..vr + dh];
                        let pj = p[zslot + j];
                        for (o, &gi) in dvr.iter_mut().zip(go) {
                            *o = *o + pj * gi;
                        }
                    }
                    let s = kernels::dot(ds, p);
                    for (dsi, &pi) in ds.iter_mut().zip(p) {
                        *dsi = pi * (*dsi - s) * scale;
                    }
                    let q_row = &qd[row * d + col..][..dh];
                    if let Some(z) = zd {
                        let w = ds[0];
                        let zh = &z[col..col + dh];
                        let dqr = &mut dq[row * d + col..][..dh];
                        for (o, &zv) in dqr.iter_mut().zip(zh) {
                            *o = *o + w * zv;
                        }
                        for (o, &qv) in dz[col..col + dh].iter_mut().zip(q_row) {
                            *o = *o + w * qv;
                        }
                    }
                    for j in 0..=t {
                        let w = ds[zslot + j];
                        let kr = (b * seq + j) * d + col;
                        let dqr = &mut dq[row * d + col..][..dh];
                        for (o, &kv) in dqr.iter_mut().zip(&kd[kr..kr + dh]) {
                            *o = *o + w * kv;
                        }
                        for (o, &qv) in dk[kr..kr + dh].iter_mut().zip(q_row) {
                            *o = *o + w * qv;
                        }
                    }
                }
            }
        }
        add_into(slot(grads, iq, dq.len()), &dq);
        add_into(slot(grads, ik, dk.len()), &dk);
        add_into(slot(grads, iv, dv.len()), &dv);
        if let Some(i) = iz {
            add_into(slot(grads, i, d), &dz);
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// reach the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }
}
