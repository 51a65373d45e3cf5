//! Reverse-mode differentiation on an append-only operation tape.
//!
//! Nodes are recorded in insertion order, which is also the topological
//! order. Backward recomputes whatever per-op context it needs from the
//! stored forward values instead of caching it, which keeps the op enum
//! small and the memory profile flat.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, log_sum_exp, matmul, matmul_bt, matmul_ta, softmax_row_into,
    softmax_rows, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Attention masking modes. Additive masks use a large negative constant so
/// kernel outputs stay finite.
#[derive(Debug, Clone)]
pub enum AttnMask {
    None,
    /// Strict causal mask: query t attends to keys 0..=t.
    Causal,
    /// Per-key additive mask `[batch, key_len]`, 0 for visible, `MASKED` for hidden.
    KeyPad(Arc<Vec<f64>>),
}

pub const MASKED: f64 = -1.0e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a[..., k] x b[k, n]
    Matmul { a: NodeId, b: NodeId },
    /// a[..., k] x b[n, k]^T (used for tied output projections)
    MatmulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x[..., d] + bias[d]
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    SoftmaxRows { x: NodeId },
    /// Multi-head scaled dot-product attention over packed `[batch, len, d_model]`
    /// inputs; head h occupies the column slice `h*dh..(h+1)*dh`.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
    },
    /// Row gather from a 2-d table; output rows follow `ids` order.
    EmbedRows { table: NodeId, ids: Arc<Vec<u32>> },
    /// Mean over non-ignored positions of -log softmax(logits)[target],
    /// optionally label-smoothed.
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        ignore: u32,
        smoothing: f64,
    },
    /// Elementwise product with a fixed (non-differentiated) mask.
    DropoutMask { x: NodeId, mask: Arc<Vec<f64>> },
    Reshape { x: NodeId },
    Sum { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Append-only autodiff tape. Single-writer; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert an input or parameter tensor. Gradients flow iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        let ng = value.requires_grad();
        self.push(value, Op::Leaf, ng, "leaf")
    }

    /// Insert a named parameter leaf; `backward` reports gradients keyed by
    /// these names.
    pub fn named_leaf(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, trainable, "leaf")?;
        self.nodes[id.0].name = Some(name.to_string());
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul { a, b }, ng, "matmul")
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_bt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatmulBt { a, b }, ng, "matmul_bt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::Shape(format!(
                "add dims disagree: {:?} vs {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.dims(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, ng, "add")
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.dims() != [d] {
            return Err(Error::Shape(format!(
                "bias dims {:?} do not match last axis {}",
                tb.dims(),
                d
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_vec(tx.dims(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias { x, bias }, ng, "add_bias")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(tx.dims(), data)?;
        let ng = self.needs(x);
        self.push(value, Op::Scale { x, c }, ng, "scale")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::from_vec(tx.dims(), data)?;
        let ng = self.needs(x);
        self.push(value, Op::Gelu { x }, ng, "gelu")
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gamma + beta` over the trailing
    /// axis, with population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.dims() != [d] || tb.dims() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gamma {:?} / beta {:?} do not match axis {}",
                tg.dims(),
                tb.dims(),
                d
            )));
        }
        let mut data = vec![0.0; tx.len()];
        let gd = tg.data();
        let bd = tb.data();
        for (orow, xrow) in data.chunks_mut(d).zip(tx.data().chunks(d)) {
            let (mean, inv_std) = row_norm_stats(xrow, eps);
            for i in 0..d {
                orow[i] = (xrow[i] - mean) * inv_std * gd[i] + bd[i];
            }
        }
        let value = Tensor::from_vec(tx.dims(), data)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, eps }, ng, "layer_norm")
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(value, Op::SoftmaxRows { x }, ng, "softmax")
    }

    /// Multi-head attention. `q` is `[b, lq, d]`, `k`/`v` are `[b, lk, d]`
    /// with `d` divisible by `heads`; scores are scaled by `1/sqrt(d/heads)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (b, lq, d) = dims3(tq, "attention q")?;
        let (bk, lk, dk) = dims3(tk, "attention k")?;
        if tv.dims() != tk.dims() {
            return Err(Error::Shape(format!(
                "attention k {:?} vs v {:?}",
                tk.dims(),
                tv.dims()
            )));
        }
        if b != bk || d != dk {
            return Err(Error::Shape(format!(
                "attention q {:?} incompatible with k {:?}",
                tq.dims(),
                tk.dims()
            )));
        }
        if d % heads != 0 {
            return Err(Error::Shape(format!("d_model {} not divisible by {} heads", d, heads)));
        }
        if let AttnMask::KeyPad(m) = &mask {
            if m.len() != b * lk {
                return Err(Error::Shape(format!(
                    "key mask length {} does not match batch {} x key len {}",
                    m.len(),
                    b,
                    lk
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; b * lq * d];
        let qd = tq.data();
        let kd = tk.data();
        let vd = tv.data();
        let mask_ref = &mask;
        let batch_fn = |bi: usize, ob: &mut [f64]| {
            let qb = &qd[bi * lq * d..(bi + 1) * lq * d];
            let kb = &kd[bi * lk * d..(bi + 1) * lk * d];
            let vb = &vd[bi * lk * d..(bi + 1) * lk * d];
            let mut scores = vec![0.0; lk];
            let mut probs = vec![0.0; lk];
            for h in 0..heads {
                let hc = h * dh;
                for t in 0..lq {
                    let qrow = &qb[t * d + hc..t * d + hc + dh];
                    let visible = visible_keys(mask_ref, t, lq, lk);
                    for s in 0..visible {
                        let mut acc = 0.0;
                        let krow = &kb[s * d + hc..s * d + hc + dh];
                        for (qv, kv) in qrow.iter().zip(krow) {
                            acc += qv * kv;
                        }
                        scores[s] = acc * scale + mask_value(mask_ref, bi, s, lk);
                    }
                    softmax_row_into(&scores[..visible], &mut probs[..visible]);
                    let orow = &mut ob[t * d + hc..t * d + hc + dh];
                    orow.iter_mut().for_each(|o| *o = 0.0);
                    for s in 0..visible {
                        let p = probs[s];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vb[s * d + hc..s * d + hc + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        };
        if b * lq * lk * d * 2 < crate::tensor::PARALLEL_FLOPS {
            for (bi, ob) in out.chunks_mut(lq * d).enumerate() {
                batch_fn(bi, ob);
            }
        } else {
            out.par_chunks_mut(lq * d)
                .enumerate()
                .for_each(|(bi, ob)| batch_fn(bi, ob));
        }
        let value = Tensor::from_vec(&[b, lq, d], out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(value, Op::Attention { q, k, v, heads, mask }, ng, "attention")
    }

    /// Gather rows of a `[vocab, d]` table; output is `[len(ids), d]`.
    pub fn embed_rows(&mut self, table: NodeId, ids: Arc<Vec<u32>>) -> Result<NodeId> {
        let tt = self.value(table);
        if tt.dims().len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be 2-d, got {:?}",
                tt.dims()
            )));
        }
        let (vocab, d) = (tt.dims()[0], tt.dims()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Vocab(format!("token id {} outside vocab {}", id, vocab)));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], data)?;
        let ng = self.needs(table);
        self.push(value, Op::EmbedRows { table, ids }, ng, "embed_rows")
    }

    /// Mean over non-ignored positions of `-log softmax(logits)[target]`.
    /// `logits` is `[..., vocab]` with one target per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<u32>, ignore: u32) -> Result<NodeId> {
        self.cross_entropy_smoothed(logits, targets, ignore, 0.0)
    }

    /// Label-smoothed variant: each row's loss is
    /// `(1-s) * nll(target) + s * mean_v nll(v)`.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: NodeId,
        targets: Vec<u32>,
        ignore: u32,
        smoothing: f64,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing {} outside [0, 1)",
                smoothing
            )));
        }
        let tl = self.value(logits);
        let vocab = tl.last_dim();
        let rows = tl.rows();
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                rows
            )));
        }
        for &t in &targets {
            if t != ignore && t as usize >= vocab {
                return Err(Error::Vocab(format!("target {} outside vocab {}", t, vocab)));
            }
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, &t) in tl.data().chunks(vocab).zip(&targets) {
            if t == ignore {
                continue;
            }
            let lse = log_sum_exp(row);
            let nll = lse - row[t as usize];
            if smoothing > 0.0 {
                let mean: f64 = row.iter().sum::<f64>() / vocab as f64;
                total += (1.0 - smoothing) * nll + smoothing * (lse - mean);
            } else {
                total += nll;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = Tensor::scalar(total / count as f64);
        let ng = self.needs(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets),
                ignore,
                smoothing,
            },
            ng,
            "cross_entropy",
        )
    }

    /// Elementwise multiply by a fixed dropout mask (entries 0 or 1/(1-p)).
    pub fn dropout_mask(&mut self, x: NodeId, mask: Arc<Vec<f64>>) -> Result<NodeId> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::Shape(format!(
                "dropout mask length {} vs tensor {}",
                mask.len(),
                tx.len()
            )));
        }
        let data = tx.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(tx.dims(), data)?;
        let ng = self.needs(x);
        self.push(value, Op::DropoutMask { x, mask }, ng, "dropout")
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(dims)?;
        let ng = self.needs(x);
        self.push(value, Op::Reshape { x }, ng, "reshape")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum { x }, ng, "sum")
    }

    /// Reverse sweep from a scalar root. Returns gradients for every *named*
    /// leaf that requires gradients; frozen leaves receive none.
    pub fn backward(&self, root: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward_nodes(root)?;
        let mut out = BTreeMap::new();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(name), Some(g)) = (&node.name, grad) {
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    /// Gradient of the root with respect to one specific leaf (test helper).
    pub fn grad_of(&self, root: NodeId, leaf: NodeId) -> Result<Option<Tensor>> {
        let mut grads = self.backward_nodes(root)?;
        Ok(grads[leaf.0].take())
    }

    fn backward_nodes(&self, root: NodeId) -> Result<Vec<Option<Tensor>>> {
        if !self.value(root).is_scalar() {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(grads);
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            self.accumulate_inputs(idx, &grad, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(grad);
            }
        }
        Ok(grads)
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut add_to = |id: NodeId, g: Tensor, grads: &mut [Option<Tensor>]| -> Result<()> {
            if !self.needs(id) {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    if acc.dims() != g.dims() {
                        return Err(Error::Shape(format!(
                            "gradient dims disagree: {:?} vs {:?}",
                            acc.dims(),
                            g.dims()
                        )));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
            Ok(())
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.needs(*a) {
                    let g = matmul_bt(grad, self.value(*b))?;
                    add_to(*a, g.reshaped(self.value(*a).dims())?, grads)?;
                }
                if self.needs(*b) {
                    let g = matmul_ta(self.value(*a), grad)?;
                    add_to(*b, g, grads)?;
                }
            }
            Op::MatmulBt { a, b } => {
                if self.needs(*a) {
                    let g = matmul(grad, self.value(*b))?;
                    add_to(*a, g.reshaped(self.value(*a).dims())?, grads)?;
                }
                if self.needs(*b) {
                    let g = matmul_ta(grad, self.value(*a))?;
                    add_to(*b, g, grads)?;
                }
            }
            Op::Add { a, b } => {
                add_to(*a, grad.clone(), grads)?;
                add_to(*b, grad.clone(), grads)?;
            }
            Op::AddBias { x, bias } => {
                add_to(*x, grad.clone(), grads)?;
                if self.needs(*bias) {
                    let d = self.value(*bias).len();
                    let mut acc = vec![0.0; d];
                    for row in grad.data().chunks(d) {
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    add_to(*bias, Tensor::from_vec(&[d], acc)?, grads)?;
                }
            }
            Op::Scale { x, c } => {
                let data = grad.data().iter().map(|g| g * c).collect();
                add_to(*x, Tensor::from_vec(grad.dims(), data)?, grads)?;
            }
            Op::Gelu { x } => {
                let tx = self.value(*x);
                let data = grad
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| g * gelu_grad_scalar(v))
                    .collect();
                add_to(*x, Tensor::from_vec(tx.dims(), data)?, grads)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.layer_norm_backward(*x, *gamma, *beta, *eps, grad, &mut add_to, grads)?;
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[idx].value;
                let d = y.last_dim();
                let mut data = vec![0.0; y.len()];
                for ((orow, yrow), grow) in data
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(grad.data().chunks(d))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for i in 0..d {
                        orow[i] = yrow[i] * (grow[i] - dot);
                    }
                }
                add_to(*x, Tensor::from_vec(y.dims(), data)?, grads)?;
            }
            Op::Attention { q, k, v, heads, mask } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *heads, mask, grad)?;
                add_to(*q, gq, grads)?;
                add_to(*k, gk, grads)?;
                add_to(*v, gv, grads)?;
            }
            Op::EmbedRows { table, ids } => {
                if self.needs(*table) {
                    let tt = self.value(*table);
                    let d = tt.dims()[1];
                    let mut acc = vec![0.0; tt.len()];
                    for (row, &id) in grad.data().chunks(d).zip(ids.iter()) {
                        let base = id as usize * d;
                        for (i, &g) in row.iter().enumerate() {
                            acc[base + i] += g;
                        }
                    }
                    add_to(*table, Tensor::from_vec(tt.dims(), acc)?, grads)?;
                }
            }
            Op::CrossEntropy { logits, targets, ignore, smoothing } => {
                if self.needs(*logits) {
                    let tl = self.value(*logits);
                    let vocab = tl.last_dim();
                    let count = targets.iter().filter(|&&t| t != *ignore).count() as f64;
                    let gscale = grad.item()? / count;
                    let uniform = smoothing / vocab as f64;
                    let mut data = vec![0.0; tl.len()];
                    let mut probs = vec![0.0; vocab];
                    for ((orow, xrow), &t) in data
                        .chunks_mut(vocab)
                        .zip(tl.data().chunks(vocab))
                        .zip(targets.iter())
                    {
                        if t == *ignore {
                            continue;
                        }
                        softmax_row_into(xrow, &mut probs);
                        for i in 0..vocab {
                            orow[i] = (probs[i] - uniform) * gscale;
                        }
                        orow[t as usize] -= (1.0 - smoothing) * gscale;
                    }
                    add_to(*logits, Tensor::from_vec(tl.dims(), data)?, grads)?;
                }
            }
            Op::DropoutMask { x, mask } => {
                let data = grad.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                add_to(*x, Tensor::from_vec(grad.dims(), data)?, grads)?;
            }
            Op::Reshape { x } => {
                add_to(*x, grad.reshaped(self.value(*x).dims())?, grads)?;
            }
            Op::Sum { x } => {
                let g = grad.item()?;
                let tx = self.value(*x);
                add_to(*x, Tensor::filled(tx.dims(), g), grads)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        grad: &Tensor,
        add_to: &mut impl FnMut(NodeId, Tensor, &mut [Option<Tensor>]) -> Result<()>,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let tx = self.value(x);
        let gd = self.value(gamma).data();
        let d = tx.last_dim();
        let mut dx = vec![0.0; tx.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut gy = vec![0.0; d];
        for ((dxrow, xrow), grow) in dx
            .chunks_mut(d)
            .zip(tx.data().chunks(d))
            .zip(grad.data().chunks(d))
        {
            let (mean, inv_std) = row_norm_stats(xrow, eps);
            for i in 0..d {
                xhat[i] = (xrow[i] - mean) * inv_std;
                gy[i] = grow[i] * gd[i];
                dgamma[i] += grow[i] * xhat[i];
                dbeta[i] += grow[i];
            }
            let mean_gy: f64 = gy.iter().sum::<f64>() / d as f64;
            let mean_gy_xhat: f64 = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for i in 0..d {
                dxrow[i] = (gy[i] - mean_gy - xhat[i] * mean_gy_xhat) * inv_std;
            }
        }
        add_to(x, Tensor::from_vec(tx.dims(), dx)?, grads)?;
        add_to(gamma, Tensor::from_vec(&[d], dgamma)?, grads)?;
        add_to(beta, Tensor::from_vec(&[d], dbeta)?, grads)?;
        Ok(())
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: &AttnMask,
        grad: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (_b, lq, d) = dims3(tq, "attention q")?;
        let lk = tk.dims()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = tq.data();
        let kd = tk.data();
        let vd = tv.data();
        let gd = grad.data();
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        // Each batch writes disjoint slices; parallel only when heavy.
        let batch_fn = |bi: usize, dqb: &mut [f64], dkb: &mut [f64], dvb: &mut [f64]| {
                let qb = &qd[bi * lq * d..(bi + 1) * lq * d];
                let kb = &kd[bi * lk * d..(bi + 1) * lk * d];
                let vb = &vd[bi * lk * d..(bi + 1) * lk * d];
                let gb = &gd[bi * lq * d..(bi + 1) * lq * d];
                let mut scores = vec![0.0; lk];
                let mut probs = vec![0.0; lk];
                let mut dprobs = vec![0.0; lk];
                for h in 0..heads {
                    let hc = h * dh;
                    for t in 0..lq {
                        let visible = visible_keys(mask, t, lq, lk);
                        let qrow = &qb[t * d + hc..t * d + hc + dh];
                        for s in 0..visible {
                            let krow = &kb[s * d + hc..s * d + hc + dh];
                            let mut acc = 0.0;
                            for (qv, kv) in qrow.iter().zip(krow) {
                                acc += qv * kv;
                            }
                            scores[s] = acc * scale + mask_value(mask, bi, s, lk);
                        }
                        softmax_row_into(&scores[..visible], &mut probs[..visible]);
                        let grow = &gb[t * d + hc..t * d + hc + dh];
                        // dV += P^T g ; dP = g . V
                        let mut dot = 0.0;
                        for s in 0..visible {
                            let vrow = &vb[s * d + hc..s * d + hc + dh];
                            let mut dp = 0.0;
                            for (gv, vv) in grow.iter().zip(vrow) {
                                dp += gv * vv;
                            }
                            dprobs[s] = dp;
                            dot += dp * probs[s];
                            let dvrow = &mut dvb[s * d + hc..s * d + hc + dh];
                            let p = probs[s];
                            for (o, &gv) in dvrow.iter_mut().zip(grow) {
                                *o += p * gv;
                            }
                        }
                        // dS = P * (dP - dot) ; dQ += scale * dS K ; dK += scale * dS^T Q
                        let dqrow = &mut dqb[t * d + hc..t * d + hc + dh];
                        for s in 0..visible {
                            let ds = probs[s] * (dprobs[s] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kb[s * d + hc..s * d + hc + dh];
                            for (o, &kv) in dqrow.iter_mut().zip(krow) {
                                *o += ds * kv;
                            }
                            let dkrow = &mut dkb[s * d + hc..s * d + hc + dh];
                            for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
            };
        let b = tq.dims()[0];
        if b * lq * lk * d * 4 < crate::tensor::PARALLEL_FLOPS {
            for (bi, ((dqb, dkb), dvb)) in dq
                .chunks_mut(lq * d)
                .zip(dk.chunks_mut(lk * d))
                .zip(dv.chunks_mut(lk * d))
                .enumerate()
            {
                batch_fn(bi, dqb, dkb, dvb);
            }
        } else {
            dq.par_chunks_mut(lq * d)
                .zip(dk.par_chunks_mut(lk * d))
                .zip(dv.par_chunks_mut(lk * d))
                .enumerate()
                .for_each(|(bi, ((dqb, dkb), dvb))| batch_fn(bi, dqb, dkb, dvb));
        }
        Ok((
            Tensor::from_vec(tq.dims(), dq)?,
            Tensor::from_vec(tk.dims(), dk)?,
            Tensor::from_vec(tv.dims(), dv)?,
        ))
    }
}

fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.dims().len() != 3 {
        return Err(Error::Shape(format!("{} must be 3-d, got {:?}", what, t.dims())));
    }
    Ok((t.dims()[0], t.dims()[1], t.dims()[2]))
}

/// Number of visible key positions for query `t` (causal masking truncates
/// the tail; additive key masks keep the full range).
fn visible_keys(mask: &AttnMask, t: usize, lq: usize, lk: usize) -> usize {
    match mask {
        AttnMask::Causal => lk - lq + t + 1,
        _ => lk,
    }
}

fn mask_value(mask: &AttnMask, batch: usize, key: usize, lk: usize) -> f64 {
    match mask {
        AttnMask::KeyPad(m) => m[batch * lk + key],
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::new();
        let eye = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn matmul_hand_sum() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = g.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent j-outer triple loop, a different accumulation order
        // from the production kernel.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        let mut expected = vec![0.0; 3 * 2];
        for j in 0..2 {
            for i in 0..3 {
                for p in 0..4 {
                    expected[i * 2 + j] += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let an = g.leaf(a).unwrap();
        let bn = g.leaf(b).unwrap();
        let c = g.matmul(an, bn).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        }
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_constant_row_returns_beta() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 4], 3.25)).unwrap();
        let gamma = g.leaf(Tensor::filled(&[4], 2.0)).unwrap();
        let beta = g.leaf(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in g.value(y).data().chunks(4) {
            for (got, want) in row.iter().zip([0.1, 0.2, 0.3, 0.4]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_already_normalised_row() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        let gamma = g.leaf(Tensor::filled(&[2], 1.0)).unwrap();
        let beta = g.leaf(Tensor::zeros(&[2])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 8], &mut rng);
        let gamma = rand_tensor(&[8], &mut rng);
        let beta = rand_tensor(&[8], &mut rng);
        let eps = 1e-5;
        let mean: f64 = x.data().iter().sum::<f64>() / 8.0;
        let var: f64 = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let expected: Vec<f64> = x
            .data()
            .iter()
            .zip(gamma.data().iter().zip(beta.data()))
            .map(|(v, (g, b))| (v - mean) / (var + eps).sqrt() * g + b)
            .collect();
        let mut g = Graph::new();
        let xn = g.leaf(x).unwrap();
        let gn = g.leaf(gamma).unwrap();
        let bn = g.leaf(beta).unwrap();
        let y = g.layer_norm(xn, gn, bn, eps).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[3, 4])).unwrap();
        let loss = g.cross_entropy(logits, vec![0, 1, 3], u32::MAX).unwrap();
        assert!((g.value(loss).item().unwrap() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_class_is_near_zero() {
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[1, 4]);
        t.data_mut()[2] = 100.0;
        let logits = g.leaf(t).unwrap();
        let loss = g.cross_entropy(logits, vec![2], u32::MAX).unwrap();
        assert!(g.value(loss).item().unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_example() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let loss = g.cross_entropy(logits, vec![2], u32::MAX).unwrap();
        // -ln(e^3 / (e + e^2 + e^3))
        let expected = (1.0 + (-1.0_f64).exp() + (-2.0_f64).exp()).ln();
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
        assert!((g.value(loss).item().unwrap() - 0.407606).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_marked_positions_and_rejects_empty() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0]).unwrap()).unwrap();
        let loss = g.cross_entropy(logits, vec![2, 0], 0).unwrap();
        // Row with target 0 == ignore contributes nothing.
        let expected = (1.0 + (-1.0_f64).exp() + (-2.0_f64).exp()).ln();
        assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);

        let mut g2 = Graph::new();
        let logits2 = g2.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(
            g2.cross_entropy(logits2, vec![0, 0], 0),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn cross_entropy_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let logits = rand_tensor(&[4, 6], &mut rng);
            let targets: Vec<u32> = (0..4).map(|_| rng.random_range(0..6u32)).collect();
            let mut g = Graph::new();
            let l = g.leaf(logits).unwrap();
            let loss = g.cross_entropy(l, targets, u32::MAX).unwrap();
            assert!(g.value(loss).item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[6, 10], &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(x).unwrap();
        let y = g.softmax_rows(xn).unwrap();
        for row in g.value(y).data().chunks(10) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::new();
        let x = g
            .named_leaf("x", Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap(), true)
            .unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0; 6]);
    }

    #[test]
    fn backward_skips_frozen_leaves() {
        let mut g = Graph::new();
        let w = g.named_leaf("w", Tensor::from_vec(&[1, 2], vec![0.5, 0.5]).unwrap(), true).unwrap();
        let x = g.named_leaf("x", Tensor::from_vec(&[2, 1], vec![2.0, 4.0]).unwrap(), false).unwrap();
        let y = g.matmul(w, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("x"));
        assert_eq!(grads["w"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.named_leaf("x", Tensor::zeros(&[2, 2]).with_grad(true), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn kernels_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_tensor(&[7, 9], &mut rng);
        let b = rand_tensor(&[9, 5], &mut rng);
        let run = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let an = g.leaf(a.clone()).unwrap();
            let bn = g.leaf(b.clone()).unwrap();
            let c = g.matmul(an, bn).unwrap();
            let s = g.softmax_rows(c).unwrap();
            g.value(s).data().to_vec()
        };
        let r1 = run(&a, &b);
        let r2 = run(&a, &b);
        assert_eq!(r1, r2, "bit-identical outputs for identical inputs");
    }

    #[test]
    fn attention_causal_masking_blocks_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&[1, 4, 6], &mut rng);
        let k = rand_tensor(&[1, 4, 6], &mut rng);
        let mut v1 = rand_tensor(&[1, 4, 6], &mut rng);
        let mut g = Graph::new();
        let qn = g.leaf(q.clone()).unwrap();
        let kn = g.leaf(k.clone()).unwrap();
        let vn = g.leaf(v1.clone()).unwrap();
        let out1 = g.attention(qn, kn, vn, 2, AttnMask::Causal).unwrap();
        let first_rows = g.value(out1).data()[..2 * 6].to_vec();
        // Perturb the value at the last position; rows 0..2 must not change.
        for i in 3 * 6..4 * 6 {
            v1.data_mut()[i] += 10.0;
        }
        let mut g2 = Graph::new();
        let qn = g2.leaf(q).unwrap();
        let kn = g2.leaf(k).unwrap();
        let vn = g2.leaf(v1).unwrap();
        let out2 = g2.attention(qn, kn, vn, 2, AttnMask::Causal).unwrap();
        assert_eq!(&g2.value(out2).data()[..2 * 6], &first_rows[..]);
    }

    #[test]
    fn attention_key_pad_mask_ignores_padded_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&[1, 2, 4], &mut rng);
        let k = rand_tensor(&[1, 3, 4], &mut rng);
        let v = rand_tensor(&[1, 3, 4], &mut rng);
        // Mask out key 2 entirely; output must equal attention over keys 0..2.
        let mask = Arc::new(vec![0.0, 0.0, MASKED]);
        let mut g = Graph::new();
        let (qn, kn, vn) = (g.leaf(q.clone()).unwrap(), g.leaf(k.clone()).unwrap(), g.leaf(v.clone()).unwrap());
        let masked = g.attention(qn, kn, vn, 2, AttnMask::KeyPad(mask)).unwrap();
        let k2 = k.data()[..2 * 4].to_vec();
        let v2 = v.data()[..2 * 4].to_vec();
        let mut g2 = Graph::new();
        let qn = g2.leaf(q).unwrap();
        let kn = g2.leaf(Tensor::from_vec(&[1, 2, 4], k2).unwrap()).unwrap();
        let vn = g2.leaf(Tensor::from_vec(&[1, 2, 4], v2).unwrap()).unwrap();
        let truncated = g2.attention(qn, kn, vn, 2, AttnMask::None).unwrap();
        for (a, b) in g.value(masked).data().iter().zip(g2.value(truncated).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let table = Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let mut g = Graph::new();
        let t = g.named_leaf("table", table, true).unwrap();
        let e = g.embed_rows(t, Arc::new(vec![2, 0, 2])).unwrap();
        assert_eq!(g.value(e).data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        // Row 2 gathered twice, row 1 never.
        assert_eq!(grads["table"].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let mut g2 = Graph::new();
        let t = g2.leaf(Tensor::zeros(&[3, 2])).unwrap();
        assert!(g2.embed_rows(t, Arc::new(vec![3])).is_err());
    }
}
