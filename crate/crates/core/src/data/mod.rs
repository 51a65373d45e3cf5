//! Synthetic multilingual corpora: token sequences, language derivation,
//! temperature-based sampling and corpus files.
//!
//! All languages share one vocabulary. The reserved token layout is fixed:
//! 0 = pad, 1 = BOS, 2 = EOS, 3 = mask, 4 = unk; content tokens start at 8.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

mod files;
mod grammar;
mod sampling;

pub use files::{read_mono, read_parallel, write_mono, write_parallel};
pub use grammar::{derive_language, generate_pivot_corpus, Grammar, GrammarConfig, LanguageSpec};
pub use sampling::{compute_sampling_distribution, sample_batch, PadMatrix, PaddedBatch, SamplingPolicy};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
/// First content token id; 5..8 are reserved for future framing tokens.
pub const CONTENT_START: u32 = 8;

/// Hard ceiling on framed sequence length, matching the longest source the
/// architecture family supports.
pub const MAX_SOURCE_LENGTH_CEILING: usize = 512;

/// Short lowercase ASCII language tag, unique within a corpus registry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(tag: &str) -> Result<Self> {
        if tag.is_empty() {
            return Err(Error::InvalidArgument("empty language tag".into()));
        }
        if !tag.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()) {
            return Err(Error::InvalidArgument(format!(
                "language tag {:?} must be lowercase ASCII alphanumeric",
                tag
            )));
        }
        Ok(LanguageId(tag.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for LanguageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// A framed token sequence: BOS-prefixed, EOS-suffixed, bounded length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub lang: LanguageId,
}

impl TokenSequence {
    /// Validate framing and length of an already-framed id sequence.
    pub fn from_framed(ids: Vec<u32>, lang: LanguageId, max_source_length: usize) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || *ids.last().unwrap() != EOS {
            return Err(Error::InvalidArgument(format!(
                "sequence must start with BOS and end with EOS, got {:?}",
                &ids[..ids.len().min(4)]
            )));
        }
        let cap = max_source_length.min(MAX_SOURCE_LENGTH_CEILING);
        if ids.len() > cap {
            return Err(Error::InvalidArgument(format!(
                "framed length {} exceeds limit {}",
                ids.len(),
                cap
            )));
        }
        Ok(TokenSequence { ids, lang })
    }

    /// The ids without the BOS/EOS frame.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Frame raw ids with BOS/EOS, truncating to `max_source_length` by keeping
/// the head and re-appending EOS.
pub fn encode_sentence(
    raw: &[u32],
    lang: LanguageId,
    max_source_length: usize,
    vocab_size: usize,
) -> Result<TokenSequence> {
    if max_source_length < 2 {
        return Err(Error::InvalidArgument(
            "max_source_length must allow BOS and EOS".into(),
        ));
    }
    for &id in raw {
        if id as usize >= vocab_size {
            return Err(Error::Vocab(format!(
                "token id {} outside vocabulary of size {}",
                id, vocab_size
            )));
        }
    }
    let cap = max_source_length.min(MAX_SOURCE_LENGTH_CEILING);
    let keep = raw.len().min(cap - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend_from_slice(&raw[..keep]);
    ids.push(EOS);
    TokenSequence::from_framed(ids, lang, cap)
}

/// Aligned parallel data per source language, all sharing one target side.
#[derive(Debug, Clone)]
pub struct MultilingualCorpus {
    pairs: BTreeMap<LanguageId, Vec<(TokenSequence, TokenSequence)>>,
    target_lang: LanguageId,
}

impl MultilingualCorpus {
    pub fn new(
        pairs: BTreeMap<LanguageId, Vec<(TokenSequence, TokenSequence)>>,
        target_lang: LanguageId,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("corpus has no language pairs".into()));
        }
        for (lang, list) in &pairs {
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "language {} has an empty pair list",
                    lang
                )));
            }
        }
        Ok(MultilingualCorpus { pairs, target_lang })
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageId> {
        self.pairs.keys()
    }

    pub fn pairs_for(&self, lang: &LanguageId) -> Option<&[(TokenSequence, TokenSequence)]> {
        self.pairs.get(lang).map(|v| v.as_slice())
    }

    pub fn pair_map(&self) -> &BTreeMap<LanguageId, Vec<(TokenSequence, TokenSequence)>> {
        &self.pairs
    }

    pub fn target_lang(&self) -> &LanguageId {
        &self.target_lang
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.values().map(|v| v.len()).sum()
    }

    /// Sentence-count proportions per language (the documented reading of
    /// "percentage of each language").
    pub fn proportions(&self) -> BTreeMap<LanguageId, f64> {
        let total = self.total_pairs() as f64;
        self.pairs
            .iter()
            .map(|(lang, list)| (lang.clone(), list.len() as f64 / total))
            .collect()
    }

    /// All pairs of every language concatenated in language order.
    pub fn concatenated(&self) -> Vec<(TokenSequence, TokenSequence)> {
        self.pairs.values().flatten().cloned().collect()
    }
}
