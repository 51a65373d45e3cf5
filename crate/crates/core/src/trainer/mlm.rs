//! Masked-LM pretraining of the encoder and tied embeddings on multilingual
//! monolingual text: the desk-scale stand-in for a large pretrained encoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, clip_gradients, AdamState, OptimizerConfig};
use super::checkpoint::{Checkpoint, RngState};
use super::schedule::warmup_inv_sqrt;
use crate::autograd::Graph;
use crate::data::{LanguageId, PadMatrix, SamplingPolicy, TokenSequence, BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{
    encode, partition_all_trainable, Forward, Mode, ModelConfig, ModelState, EMBED_TOKENS,
};

/// Target sentinel for unselected positions.
const IGNORE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct MlmConfig {
    pub steps: usize,
    pub batch_tokens: usize,
    /// Fraction of content positions selected for prediction.
    pub mask_ratio: f64,
    /// Of the selected positions: 80% become the mask token, 10% a random
    /// content token, 10% stay unchanged.
    pub lr: f64,
    pub warmup: usize,
    /// Temperature for the language sampler.
    pub alpha: f64,
    /// Token range random replacements are drawn from.
    pub content_range: Range<u32>,
}

impl MlmConfig {
    pub fn new(steps: usize, batch_tokens: usize, content_range: Range<u32>) -> Self {
        MlmConfig {
            steps,
            batch_tokens,
            mask_ratio: 0.15,
            lr: 5e-4,
            warmup: 100,
            alpha: 0.2,
            content_range,
        }
    }
}

/// Apply masked-LM corruption to a padded batch. Returns the corrupted ids
/// and per-position targets (original ids at selected positions, sentinel
/// elsewhere).
pub fn mask_batch(
    batch: &PadMatrix,
    mask_ratio: f64,
    content_range: &Range<u32>,
    rng: &mut ChaCha8Rng,
) -> Result<(PadMatrix, Vec<u32>)> {
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(Error::EmptyLoss);
    }
    let mut ids = batch.ids.clone();
    let mut targets = vec![IGNORE; ids.len()];
    for (i, slot) in ids.iter_mut().enumerate() {
        let tok = *slot;
        if tok == PAD || tok == BOS || tok == EOS {
            continue;
        }
        if rng.random_range(0.0..1.0) >= mask_ratio {
            continue;
        }
        targets[i] = tok;
        let r = rng.random_range(0.0..1.0);
        if r < 0.8 {
            *slot = MASK;
        } else if r < 0.9 {
            *slot = rng.random_range(content_range.clone());
        }
        // Remaining 10%: keep the token unchanged.
    }
    Ok((
        PadMatrix {
            ids,
            rows: batch.rows,
            width: batch.width,
            lens: batch.lens.clone(),
        },
        targets,
    ))
}

fn sample_mono_batch(
    corpora: &BTreeMap<LanguageId, Vec<TokenSequence>>,
    policy: &SamplingPolicy,
    batch_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PadMatrix> {
    let lang = policy.sample_language(rng);
    let sentences = corpora
        .get(&lang)
        .ok_or_else(|| Error::InvalidArgument(format!("no monolingual data for {}", lang)))?;
    let mut chosen: Vec<&TokenSequence> = Vec::new();
    let mut width = 0usize;
    loop {
        let pick = &sentences[rng.random_range(0..sentences.len())];
        let cand = width.max(pick.len());
        if !chosen.is_empty() && (chosen.len() + 1) * cand > batch_tokens {
            break;
        }
        if chosen.is_empty() && cand > batch_tokens {
            return Err(Error::InvalidArgument(format!(
                "batch_tokens {} smaller than longest sentence {}",
                batch_tokens, cand
            )));
        }
        width = cand;
        chosen.push(pick);
        if chosen.len() * width >= batch_tokens {
            break;
        }
    }
    PadMatrix::from_sequences(&chosen)
}

/// The masked-token prediction loss over one corrupted batch.
fn mlm_loss(
    fw: &mut Forward,
    cfg: &ModelConfig,
    masked: &PadMatrix,
    targets: Vec<u32>,
) -> Result<crate::autograd::NodeId> {
    let enc = encode(fw, cfg, masked)?;
    let tokens = fw.p(EMBED_TOKENS)?;
    let logits = fw.graph.matmul_bt(enc.hidden, tokens)?;
    fw.graph.cross_entropy(logits, targets, IGNORE)
}

pub struct MlmOutcome {
    pub state: ModelState,
    pub log: String,
    pub final_loss: f64,
}

/// Train an encoder-only model with masked-token prediction; languages are
/// sampled with the same temperature-adjusted multinomial as fine-tuning.
pub fn pretrain_mlm(
    cfg: &ModelConfig,
    corpora: &BTreeMap<LanguageId, Vec<TokenSequence>>,
    mlm: &MlmConfig,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<MlmOutcome> {
    if corpora.is_empty() {
        return Err(Error::InvalidArgument("no monolingual corpora".into()));
    }
    if !(mlm.mask_ratio > 0.0) {
        return Err(Error::EmptyLoss);
    }
    let total: usize = corpora.values().map(|v| v.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all monolingual corpora are empty".into()));
    }
    let proportions: BTreeMap<LanguageId, f64> = corpora
        .iter()
        .map(|(l, v)| (l.clone(), v.len() as f64 / total as f64))
        .collect();
    let policy = SamplingPolicy::new(proportions, mlm.alpha)?;
    let mut state = ModelState::init_encoder_only(cfg, seed)?;
    let partition = partition_all_trainable(&state);
    let mut moments = AdamState::new(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = String::new();
    let mut loss_value = f64::NAN;
    for step in 1..=mlm.steps {
        let lr = warmup_inv_sqrt(step, mlm.lr, mlm.warmup);
        let batch = sample_mono_batch(corpora, &policy, mlm.batch_tokens, &mut rng)?;
        let (masked, targets) = mask_batch(&batch, mlm.mask_ratio, &mlm.content_range, &mut rng)?;
        let mut graph = Graph::new();
        let loss = {
            let mut fw = Forward::new(
                &mut graph,
                &state,
                cfg.dropout,
                Mode::Train {
                    rng: &mut rng,
                    partition: &partition,
                },
            );
            mlm_loss(&mut fw, cfg, &masked, targets)?
        };
        loss_value = graph.value(loss).item()?;
        let mut grads = graph.backward(loss)?;
        drop(graph);
        clip_gradients(&mut grads, optimizer.clip_norm);
        adam_step(&mut state, &mut moments, &grads, &partition, step, lr, optimizer)?;
        if step % (mlm.steps / 10).max(1) == 0 || step == mlm.steps {
            writeln!(log, "{}\tmlm\t{:.6e}\t{:.6}\t-", step, lr, loss_value)
                .expect("writing to a string cannot fail");
        }
    }
    Ok(MlmOutcome {
        state,
        log,
        final_loss: loss_value,
    })
}

/// Package a pretrained encoder as a checkpoint (encoder + embeddings only).
pub fn encoder_checkpoint(state: &ModelState, cfg: &ModelConfig, step: u64, seed: u64) -> Checkpoint {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    Checkpoint::new(cfg.clone(), step, state.encoder_snapshot(), RngState::capture(&rng))
}

/// Masked-token prediction accuracy on held-out sentences: corrupt with the
/// same scheme, predict with argmax, and score selected positions only.
pub fn mlm_accuracy(
    state: &ModelState,
    cfg: &ModelConfig,
    sentences: &[TokenSequence],
    mask_ratio: f64,
    content_range: &Range<u32>,
    seed: u64,
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("no held-out sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in sentences.chunks(16) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let batch = PadMatrix::from_sequences(&refs)?;
        let (masked, targets) = mask_batch(&batch, mask_ratio, content_range, &mut rng)?;
        let mut graph = Graph::new();
        let logits = {
            let mut fw = Forward::new(&mut graph, state, cfg.dropout, Mode::Eval);
            let enc = encode(&mut fw, cfg, &masked)?;
            let tokens = fw.p(EMBED_TOKENS)?;
            fw.graph.matmul_bt(enc.hidden, tokens)?
        };
        let v = cfg.vocab_size;
        let data = graph.value(logits).data();
        for (pos, &target) in targets.iter().enumerate() {
            if target == IGNORE {
                continue;
            }
            let row = &data[pos * v..(pos + 1) * v];
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (tok, &logit) in row.iter().enumerate() {
                if logit > best.0 {
                    best = (logit, tok);
                }
            }
            if best.1 as u32 == target {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(hits as f64 / total as f64)
}
