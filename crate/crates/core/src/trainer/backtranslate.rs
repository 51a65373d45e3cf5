//! One-round back-translation and round-trip checkpoint selection.

use std::path::PathBuf;

use crate::data::TokenSequence;
use crate::decode::Translator;
use crate::error::{Error, Result};
use crate::eval::corpus_bleu_sequences;

/// Translate every monolingual sentence once with the forward model and emit
/// synthetic pairs with the translation as source and the original as
/// target. Output size equals input size; no filtering.
pub fn build_backtranslation_corpus(
    forward: &impl Translator,
    monolingual: &[TokenSequence],
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    if monolingual.is_empty() {
        return Err(Error::InvalidArgument("empty monolingual input".into()));
    }
    monolingual
        .iter()
        .map(|sent| Ok((forward.translate(sent)?, sent.clone())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RoundTripSelection {
    /// Index into the candidate list.
    pub index: usize,
    /// The candidate's step label.
    pub step: u64,
    pub bleu: f64,
    /// Round-trip BLEU of every candidate, in candidate order.
    pub scores: Vec<f64>,
}

/// Score every candidate reverse model by round-trip reconstruction: the
/// fixed forward model maps the monolingual sentences to the pivot, each
/// candidate maps them back, and the reconstruction is BLEU-scored against
/// the originals. The maximum wins; ties break to the earliest step.
pub fn select_by_round_trip<B: Translator>(
    candidates: &[(u64, B)],
    forward: &impl Translator,
    monolingual: &[TokenSequence],
) -> Result<RoundTripSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate checkpoints".into()));
    }
    if monolingual.is_empty() {
        return Err(Error::InvalidArgument("no monolingual sentences".into()));
    }
    let pivot_leg: Vec<TokenSequence> = monolingual
        .iter()
        .map(|s| forward.translate(s))
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, candidate)) in candidates.iter().enumerate() {
        let reconstruction: Vec<TokenSequence> = pivot_leg
            .iter()
            .map(|s| candidate.translate(s))
            .collect::<Result<_>>()?;
        let bleu = corpus_bleu_sequences(&reconstruction, monolingual)?.bleu;
        scores.push(bleu);
        // Strictly-greater comparison keeps the earliest step on ties.
        if best.map(|(_, b)| bleu > b).unwrap_or(true) {
            best = Some((i, bleu));
        }
    }
    let (index, bleu) = best.expect("candidates are non-empty");
    Ok(RoundTripSelection {
        index,
        step: candidates[index].0,
        bleu,
        scores,
    })
}

/// Checkpoint-file variant: load each candidate, wrap it as a translator
/// with the given settings, and select by round trip.
pub fn select_checkpoint_by_round_trip(
    checkpoint_paths: &[PathBuf],
    forward: &impl Translator,
    monolingual: &[TokenSequence],
    target_lang: &crate::data::LanguageId,
    decode: &crate::decode::DecodeConfig,
) -> Result<(PathBuf, RoundTripSelection)> {
    use crate::decode::ModelTranslator;
    

    if checkpoint_paths.is_empty() {
        return Err(Error::InvalidArgument("no candidate checkpoints".into()));
    }
    let mut loaded = Vec::with_capacity(checkpoint_paths.len());
    for path in checkpoint_paths {
        let ckpt = super::checkpoint::load_checkpoint(path)?;
        let state = super::state_from_checkpoint(&ckpt)?;
        loaded.push((ckpt.step, state, ckpt.config));
    }
    let candidates: Vec<(u64, ModelTranslator)> = loaded
        .iter()
        .map(|(step, state, config)| {
            (
                *step,
                ModelTranslator {
                    state,
                    cfg: config,
                    target_lang: target_lang.clone(),
                    target_lang_index: 0,
                    decode: decode.clone(),
                },
            )
        })
        .collect();
    let selection = select_by_round_trip(&candidates, forward, monolingual)?;
    Ok((checkpoint_paths[selection.index].clone(), selection))
}
