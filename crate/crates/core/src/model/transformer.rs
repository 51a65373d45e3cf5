//! Forward passes: post-norm encoder (with the optional PDE layer), causal
//! decoder with cross-attention, tied output logits, and the evaluation
//! entry points used by decoding and the retrieval probe.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelState, ParameterPartition, EMBED_POS, EMBED_TOKENS};
use crate::autograd::{AttnMask, Graph, NodeId, MASKED};
use crate::data::{PadMatrix, TokenSequence, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a pass trains (live dropout, trainable leaves) or evaluates
/// (dropout disabled exactly, every leaf frozen).
pub enum Mode<'r> {
    Train {
        rng: &'r mut ChaCha8Rng,
        partition: &'r ParameterPartition,
    },
    Eval,
}

/// One forward pass: binds parameters into the graph on first use so that
/// shared tensors (the tied embedding) become a single leaf.
pub struct Forward<'a, 'r> {
    pub graph: &'a mut Graph,
    state: &'a ModelState,
    mode: Mode<'r>,
    dropout: f64,
    bound: HashMap<String, NodeId>,
}

impl<'a, 'r> Forward<'a, 'r> {
    pub fn new(graph: &'a mut Graph, state: &'a ModelState, dropout: f64, mode: Mode<'r>) -> Self {
        Forward {
            graph,
            state,
            mode,
            dropout,
            bound: HashMap::new(),
        }
    }

    /// Bind (or fetch) the parameter leaf for `name`.
    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor = self.state.get(name)?.clone();
        let trainable = match &self.mode {
            Mode::Train { partition, .. } => partition.is_trainable(name),
            Mode::Eval => false,
        };
        let id = self.graph.named_leaf(name, tensor, trainable)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Inverted dropout after a sublayer; exact identity in eval mode.
    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let p = self.dropout;
        match &mut self.mode {
            Mode::Train { rng, .. } if p > 0.0 => {
                let n = self.graph.value(x).len();
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random_range(0.0..1.0) < p { 0.0 } else { keep })
                    .collect();
                self.graph.dropout_mask(x, Arc::new(mask))
            }
            _ => Ok(x),
        }
    }

    /// Token embedding + position embedding, scaled by sqrt(d_model).
    fn embed(&mut self, cfg: &ModelConfig, ids: &PadMatrix) -> Result<NodeId> {
        if ids.width > cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_positions {}",
                ids.width, cfg.max_positions
            )));
        }
        let tokens = self.p(EMBED_TOKENS)?;
        let tok = self.graph.embed_rows(tokens, Arc::new(ids.ids.clone()))?;
        let tok = self
            .graph
            .reshape(tok, &[ids.rows, ids.width, cfg.d_model])?;
        let tok = self.graph.scale(tok, (cfg.d_model as f64).sqrt())?;
        let pos_table = self.p(EMBED_POS)?;
        let pos_ids: Vec<u32> = (0..ids.rows)
            .flat_map(|_| 0..ids.width as u32)
            .collect();
        let pos = self.graph.embed_rows(pos_table, Arc::new(pos_ids))?;
        let pos = self
            .graph
            .reshape(pos, &[ids.rows, ids.width, cfg.d_model])?;
        let summed = self.graph.add(tok, pos)?;
        self.dropout(summed)
    }

    /// Projection + bias + multi-head attention + output projection.
    fn attn(
        &mut self,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let wq = self.p(&format!("{prefix}.wq"))?;
        let bq = self.p(&format!("{prefix}.bq"))?;
        let wk = self.p(&format!("{prefix}.wk"))?;
        let bk = self.p(&format!("{prefix}.bk"))?;
        let wv = self.p(&format!("{prefix}.wv"))?;
        let bv = self.p(&format!("{prefix}.bv"))?;
        let wo = self.p(&format!("{prefix}.wo"))?;
        let bo = self.p(&format!("{prefix}.bo"))?;
        let q = self.graph.matmul(q_in, wq)?;
        let q = self.graph.add_bias(q, bq)?;
        let k = self.graph.matmul(kv_in, wk)?;
        let k = self.graph.add_bias(k, bk)?;
        let v = self.graph.matmul(kv_in, wv)?;
        let v = self.graph.add_bias(v, bv)?;
        let mixed = self.graph.attention(q, k, v, heads, mask)?;
        let out = self.graph.matmul(mixed, wo)?;
        self.graph.add_bias(out, bo)
    }

    fn ffn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w1 = self.p(&format!("{prefix}.w1"))?;
        let b1 = self.p(&format!("{prefix}.b1"))?;
        let w2 = self.p(&format!("{prefix}.w2"))?;
        let b2 = self.p(&format!("{prefix}.b2"))?;
        let h = self.graph.matmul(x, w1)?;
        let h = self.graph.add_bias(h, b1)?;
        let h = self.graph.gelu(h)?;
        let h = self.graph.matmul(h, w2)?;
        self.graph.add_bias(h, b2)
    }

    fn norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.graph.layer_norm(x, gamma, beta, 1e-5)
    }

    /// Post-norm sublayer: `LN(x + dropout(f(x)))`, or `LN(dropout(f(x)))`
    /// when the residual is disentangled away.
    fn sublayer(
        &mut self,
        norm_prefix: &str,
        x: NodeId,
        inner: NodeId,
        keep_residual: bool,
    ) -> Result<NodeId> {
        let dropped = self.dropout(inner)?;
        let combined = if keep_residual {
            self.graph.add(x, dropped)?
        } else {
            dropped
        };
        self.norm(norm_prefix, combined)
    }
}

/// Encoder outputs, including per-layer traces for structural checks.
pub struct EncodeOut {
    /// Final hidden states `[batch, len, d_model]`.
    pub hidden: NodeId,
    /// Output of each full encoder layer.
    pub layers: Vec<NodeId>,
    /// Output of each self-attention sublayer (after its norm).
    pub sa_outputs: Vec<NodeId>,
    /// Additive key mask marking pad positions, shared with cross-attention.
    pub key_mask: Arc<Vec<f64>>,
}

/// Additive pad mask over a padded batch: 0 on real tokens, `MASKED` on pad.
pub fn pad_key_mask(ids: &PadMatrix) -> Arc<Vec<f64>> {
    Arc::new(
        ids.ids
            .iter()
            .map(|&t| if t == PAD { MASKED } else { 0.0 })
            .collect(),
    )
}

/// Run the encoder stack. With `cfg.pde_enabled`, the self-attention
/// sublayer at `cfg.pde_layer` drops its residual connection; the FFN
/// sublayer of that layer keeps its own.
pub fn encode(fw: &mut Forward, cfg: &ModelConfig, src: &PadMatrix) -> Result<EncodeOut> {
    let key_mask = pad_key_mask(src);
    let mut h = fw.embed(cfg, src)?;
    let mut layers = Vec::with_capacity(cfg.enc_layers);
    let mut sa_outputs = Vec::with_capacity(cfg.enc_layers);
    for i in 0..cfg.enc_layers {
        let sa = fw.attn(
            &format!("enc.{i}.sa"),
            h,
            h,
            cfg.heads,
            AttnMask::KeyPad(key_mask.clone()),
        )?;
        let keep_residual = !(cfg.pde_enabled && i == cfg.pde_index());
        h = fw.sublayer(&format!("enc.{i}.sa_norm"), h, sa, keep_residual)?;
        sa_outputs.push(h);
        let f = fw.ffn(&format!("enc.{i}.ffn"), h)?;
        h = fw.sublayer(&format!("enc.{i}.ffn_norm"), h, f, true)?;
        layers.push(h);
    }
    Ok(EncodeOut {
        hidden: h,
        layers,
        sa_outputs,
        key_mask,
    })
}

/// Target-language-aware projection of encoder states; identity pass-through
/// for single-target models.
pub fn apply_target_projection(
    fw: &mut Forward,
    cfg: &ModelConfig,
    enc_out: NodeId,
    target_lang_index: usize,
) -> Result<NodeId> {
    if cfg.n_target_langs == 1 {
        if target_lang_index != 0 {
            return Err(Error::InvalidArgument(format!(
                "target language index {} for a single-target model",
                target_lang_index
            )));
        }
        return Ok(enc_out);
    }
    if target_lang_index >= cfg.n_target_langs {
        return Err(Error::InvalidArgument(format!(
            "target language index {} out of range 0..{}",
            target_lang_index, cfg.n_target_langs
        )));
    }
    let w = fw.p(&format!("proj.lang{target_lang_index}.w"))?;
    fw.graph.matmul(enc_out, w)
}

/// Decoder stack over an embedded prefix, returning logits through the tied
/// embedding transpose: `[batch, len, vocab]`.
pub fn decoder_logits(
    fw: &mut Forward,
    cfg: &ModelConfig,
    memory: NodeId,
    memory_key_mask: Arc<Vec<f64>>,
    tgt_in: &PadMatrix,
) -> Result<NodeId> {
    let mut h = fw.embed(cfg, tgt_in)?;
    for i in 0..cfg.dec_layers {
        let sa = fw.attn(&format!("dec.{i}.sa"), h, h, cfg.heads, AttnMask::Causal)?;
        h = fw.sublayer(&format!("dec.{i}.sa_norm"), h, sa, true)?;
        let ca = fw.attn(
            &format!("dec.{i}.ca"),
            h,
            memory,
            cfg.heads,
            AttnMask::KeyPad(memory_key_mask.clone()),
        )?;
        h = fw.sublayer(&format!("dec.{i}.ca_norm"), h, ca, true)?;
        let f = fw.ffn(&format!("dec.{i}.ffn"), h)?;
        h = fw.sublayer(&format!("dec.{i}.ffn_norm"), h, f, true)?;
    }
    let tokens = fw.p(EMBED_TOKENS)?;
    fw.graph.matmul_bt(h, tokens)
}

/// Teacher-forced mean-token NLL over a padded batch. The decoder reads
/// `tgt[..n-1]` and predicts `tgt[1..]`; pad targets are excluded.
pub fn nll_node(
    fw: &mut Forward,
    cfg: &ModelConfig,
    src: &PadMatrix,
    tgt: &PadMatrix,
    target_lang_index: usize,
) -> Result<NodeId> {
    if tgt.width < 2 {
        return Err(Error::InvalidArgument("empty target".into()));
    }
    let enc = encode(fw, cfg, src)?;
    let projected = apply_target_projection(fw, cfg, enc.hidden, target_lang_index)?;
    let (tgt_in, targets) = teacher_forcing_split(tgt);
    let logits = decoder_logits(fw, cfg, projected, enc.key_mask, &tgt_in)?;
    fw.graph.cross_entropy(logits, targets, PAD)
}

/// Split a padded target batch into decoder input (`tgt[..n-1]`) and
/// prediction targets (`tgt[1..]`, pad-ignored).
pub fn teacher_forcing_split(tgt: &PadMatrix) -> (PadMatrix, Vec<u32>) {
    let width = tgt.width - 1;
    let mut ids = Vec::with_capacity(tgt.rows * width);
    let mut targets = Vec::with_capacity(tgt.rows * width);
    let mut lens = Vec::with_capacity(tgt.rows);
    for r in 0..tgt.rows {
        let row = tgt.row(r);
        ids.extend_from_slice(&row[..width]);
        targets.extend_from_slice(&row[1..]);
        lens.push((tgt.lens[r] - 1).max(1));
    }
    (
        PadMatrix {
            ids,
            rows: tgt.rows,
            width,
            lens,
        },
        targets,
    )
}

/// Mean-token NLL of one (src, tgt) pair in evaluation mode.
pub fn sequence_nll(
    state: &ModelState,
    cfg: &ModelConfig,
    src: &TokenSequence,
    tgt: &TokenSequence,
    target_lang_index: usize,
) -> Result<f64> {
    let mut graph = Graph::new();
    let mut fw = Forward::new(&mut graph, state, cfg.dropout, Mode::Eval);
    let src_m = PadMatrix::from_sequences(&[src])?;
    let tgt_m = PadMatrix::from_sequences(&[tgt])?;
    let loss = nll_node(&mut fw, cfg, &src_m, &tgt_m, target_lang_index)?;
    graph.value(loss).item()
}

/// Sum-form NLL (mean times predicted-token count).
pub fn sequence_nll_sum(
    state: &ModelState,
    cfg: &ModelConfig,
    src: &TokenSequence,
    tgt: &TokenSequence,
    target_lang_index: usize,
) -> Result<f64> {
    let mean = sequence_nll(state, cfg, src, tgt, target_lang_index)?;
    Ok(mean * (tgt.len() - 1) as f64)
}

/// Encoder memory computed once per sentence for incremental decoding.
pub struct Memory {
    /// `[1, src_len, d_model]` projected encoder states.
    pub hidden: Tensor,
    pub key_mask: Vec<f64>,
}

impl Memory {
    /// Tile the memory across `rows` hypotheses.
    pub fn tiled(&self, rows: usize) -> (Tensor, Arc<Vec<f64>>) {
        let len = self.hidden.len();
        let mut data = Vec::with_capacity(len * rows);
        let mut mask = Vec::with_capacity(self.key_mask.len() * rows);
        for _ in 0..rows {
            data.extend_from_slice(self.hidden.data());
            mask.extend_from_slice(&self.key_mask);
        }
        let dims = [rows, self.hidden.dims()[1], self.hidden.dims()[2]];
        (
            Tensor::from_vec(&dims, data).expect("tiled dims are consistent"),
            Arc::new(mask),
        )
    }
}

/// Evaluation-mode encoder + projection for one sentence.
pub fn encode_memory(
    state: &ModelState,
    cfg: &ModelConfig,
    src: &TokenSequence,
    target_lang_index: usize,
) -> Result<Memory> {
    let mut graph = Graph::new();
    let mut fw = Forward::new(&mut graph, state, cfg.dropout, Mode::Eval);
    let src_m = PadMatrix::from_sequences(&[src])?;
    let enc = encode(&mut fw, cfg, &src_m)?;
    let projected = apply_target_projection(&mut fw, cfg, enc.hidden, target_lang_index)?;
    Ok(Memory {
        hidden: graph.value(projected).clone(),
        key_mask: enc.key_mask.as_ref().clone(),
    })
}

/// Evaluation-mode decoder logits over `prefix` rows (one per hypothesis)
/// against a fixed memory. Returns `[rows, prefix_len, vocab]`.
pub fn decoder_logits_eval(
    state: &ModelState,
    cfg: &ModelConfig,
    memory: &Memory,
    prefixes: &[Vec<u32>],
) -> Result<Tensor> {
    let rows = prefixes.len();
    if rows == 0 {
        return Err(Error::InvalidArgument("no decoder prefixes".into()));
    }
    let width = prefixes[0].len();
    if prefixes.iter().any(|p| p.len() != width) {
        return Err(Error::InvalidArgument("ragged decoder prefixes".into()));
    }
    let mut graph = Graph::new();
    let mut fw = Forward::new(&mut graph, state, cfg.dropout, Mode::Eval);
    let (mem, mask) = memory.tiled(rows);
    let mem_node = fw.graph.leaf(mem)?;
    let ids: Vec<u32> = prefixes.iter().flatten().copied().collect();
    let tgt_in = PadMatrix {
        ids,
        rows,
        width,
        lens: vec![width; rows],
    };
    let logits = decoder_logits(&mut fw, cfg, mem_node, mask, &tgt_in)?;
    Ok(graph.value(logits).clone())
}

/// Mean-pooled encoder representations over non-pad positions, one vector
/// per sentence (the retrieval probe's sentence embedding).
pub fn encode_pooled(
    state: &ModelState,
    cfg: &ModelConfig,
    sentences: &[TokenSequence],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for sent in sentences {
        let mut graph = Graph::new();
        let mut fw = Forward::new(&mut graph, state, cfg.dropout, Mode::Eval);
        let m = PadMatrix::from_sequences(&[sent])?;
        let enc = encode(&mut fw, cfg, &m)?;
        let hidden = graph.value(enc.hidden);
        let d = cfg.d_model;
        let mut pooled = vec![0.0; d];
        for (t, row) in hidden.data().chunks(d).enumerate() {
            if m.ids[t] == PAD {
                continue;
            }
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        let n = m.lens[0] as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        out.push(pooled);
    }
    Ok(out)
}
