//! Pivot-language template grammar and derived synthetic languages.
//!
//! The pivot generates sentences as a cycle of subject / verb / object
//! phrases. Each content token may be preceded by a shared anchor token
//! determined by its identity, and consecutive content tokens prefer the
//! same affinity group. Derived languages remap the pivot content block
//! onto their own disjoint block (a bijection that fixes anchors) and apply
//! bounded local reordering, so translation back to the pivot is learnable
//! while languages remain distinguishable from their token inventory alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode_sentence, LanguageId, TokenSequence, CONTENT_START};
use crate::error::{Error, Result};

pub const CLASSES: usize = 3;

#[derive(Debug, Clone)]
pub struct GrammarConfig {
    pub vocab_size: usize,
    /// Number of shared anchor tokens, placed at `[CONTENT_START, CONTENT_START + anchor_count)`.
    pub anchor_count: usize,
    /// Content tokens per class per language block.
    pub tokens_per_class: usize,
    /// Probability that a content token is preceded by its anchor.
    pub anchor_prob: f64,
    /// Probability that a content token stays in the affinity group of its
    /// predecessor instead of being drawn uniformly.
    pub affinity: f64,
    /// Content length range (pre-framing), inclusive.
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            vocab_size: 416,
            anchor_count: 8,
            tokens_per_class: 16,
            anchor_prob: 0.5,
            affinity: 0.8,
            min_len: 4,
            max_len: 10,
        }
    }
}

/// Token layout helper over a [`GrammarConfig`].
#[derive(Debug, Clone)]
pub struct Grammar {
    cfg: GrammarConfig,
}

impl Grammar {
    pub fn new(cfg: GrammarConfig) -> Result<Self> {
        if cfg.vocab_size < 16 {
            return Err(Error::Vocab(format!(
                "vocab size {} too small for the grammar's reserved classes",
                cfg.vocab_size
            )));
        }
        if cfg.anchor_count == 0 || cfg.tokens_per_class == 0 {
            return Err(Error::Config("anchor_count and tokens_per_class must be positive".into()));
        }
        if cfg.min_len < 1 || cfg.max_len < cfg.min_len {
            return Err(Error::Config("invalid sentence length range".into()));
        }
        let g = Grammar { cfg };
        if g.block_end(0) > g.cfg.vocab_size as u32 {
            return Err(Error::Vocab(format!(
                "vocab size {} cannot hold anchors plus one content block",
                g.cfg.vocab_size
            )));
        }
        Ok(g)
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.cfg
    }

    pub fn anchor_start(&self) -> u32 {
        CONTENT_START
    }

    pub fn block_size(&self) -> usize {
        CLASSES * self.cfg.tokens_per_class
    }

    /// First token id of language block `index` (0 = pivot).
    pub fn block_start(&self, index: usize) -> u32 {
        CONTENT_START + self.cfg.anchor_count as u32 + (index * self.block_size()) as u32
    }

    pub fn block_end(&self, index: usize) -> u32 {
        self.block_start(index) + self.block_size() as u32
    }

    /// Number of language blocks the configured vocabulary can hold.
    pub fn max_blocks(&self) -> usize {
        let content = self.cfg.vocab_size as u32 - CONTENT_START - self.cfg.anchor_count as u32;
        content as usize / self.block_size()
    }

    /// Full content range in active use: anchors plus every representable block.
    pub fn content_range(&self) -> std::ops::Range<u32> {
        CONTENT_START..self.block_end(self.max_blocks() - 1)
    }

    fn anchor_for(&self, pivot_token: u32) -> u32 {
        let idx = (pivot_token - self.block_start(0)) as usize % self.cfg.tokens_per_class;
        self.anchor_start() + (idx % self.cfg.anchor_count) as u32
    }

    fn affinity_group(&self, pivot_token: u32) -> usize {
        let idx = (pivot_token - self.block_start(0)) as usize % self.cfg.tokens_per_class;
        idx / self.cfg.anchor_count
    }

    fn class_token(&self, class: usize, idx: usize) -> u32 {
        self.block_start(0) + (class * self.cfg.tokens_per_class + idx) as u32
    }

    /// Draw one pivot sentence's content tokens.
    fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let target = rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        let mut out = Vec::with_capacity(target + 1);
        let mut slot = 0usize;
        let mut prev_group: Option<usize> = None;
        while out.len() < target {
            let class = slot % CLASSES;
            let idx = match prev_group {
                Some(g) if rng.random_range(0.0..1.0) < self.cfg.affinity => {
                    // Stay in the predecessor's affinity group.
                    let per_group = self.cfg.anchor_count.min(self.cfg.tokens_per_class);
                    let base = g * self.cfg.anchor_count;
                    let width = per_group.min(self.cfg.tokens_per_class - base);
                    base + rng.random_range(0..width)
                }
                _ => rng.random_range(0..self.cfg.tokens_per_class),
            };
            let token = self.class_token(class, idx);
            if rng.random_range(0.0..1.0) < self.cfg.anchor_prob {
                out.push(self.anchor_for(token));
            }
            out.push(token);
            prev_group = Some(self.affinity_group(token));
            slot += 1;
        }
        out.truncate(self.cfg.max_len);
        out
    }

    /// Generate `n_sentences` pivot sentences, deterministically per seed.
    pub fn generate_pivot(
        &self,
        seed: u64,
        n_sentences: usize,
        pivot: &LanguageId,
        max_source_length: usize,
    ) -> Result<Vec<TokenSequence>> {
        if self.cfg.max_len + 2 > max_source_length {
            return Err(Error::Config(format!(
                "sentence length {} does not fit in max_source_length {}",
                self.cfg.max_len + 2,
                max_source_length
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_sentences);
        for _ in 0..n_sentences {
            let raw = self.sentence(&mut rng);
            out.push(encode_sentence(&raw, pivot.clone(), max_source_length, self.cfg.vocab_size)?);
        }
        Ok(out)
    }

    /// Build the language spec for block `index`: a bijection over the active
    /// content range that swaps the pivot block with block `index` (scrambled)
    /// and fixes anchors. Block 0 yields the identity spec.
    pub fn language_spec(
        &self,
        id: LanguageId,
        block_index: usize,
        reorder_window: usize,
        seed: u64,
    ) -> Result<LanguageSpec> {
        if block_index >= self.max_blocks() {
            return Err(Error::Vocab(format!(
                "block {} does not fit in vocab of {} (max {} blocks)",
                block_index,
                self.cfg.vocab_size,
                self.max_blocks()
            )));
        }
        let range = self.content_range();
        let offset = range.start;
        let mut perm: Vec<u32> = range.clone().collect();
        if block_index > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a6e ^ ((block_index as u64) << 32));
            let size = self.block_size();
            // Scrambled image of the pivot block inside the target block.
            let mut image: Vec<u32> = (self.block_start(block_index)..self.block_end(block_index)).collect();
            for i in (1..size).rev() {
                let j = rng.random_range(0..=i);
                image.swap(i, j);
            }
            for k in 0..size {
                let from = self.block_start(0) + k as u32;
                perm[(from - offset) as usize] = image[k];
                // Swap back so the map stays bijective.
                perm[(image[k] - offset) as usize] = from;
            }
        }
        LanguageSpec::new(id, offset, perm, reorder_window, seed)
    }
}

/// Create a pivot corpus with default grammar settings for the given vocab.
pub fn generate_pivot_corpus(
    seed: u64,
    n_sentences: usize,
    vocab_size: usize,
    length_range: (usize, usize),
    max_source_length: usize,
) -> Result<Vec<TokenSequence>> {
    let cfg = GrammarConfig {
        vocab_size,
        min_len: length_range.0,
        max_len: length_range.1,
        ..GrammarConfig::default()
    };
    let grammar = Grammar::new(cfg)?;
    grammar.generate_pivot(seed, n_sentences, &LanguageId::new("pv")?, max_source_length)
}

/// A derived synthetic language: a content-token bijection plus bounded
/// local reordering.
#[derive(Debug, Clone)]
pub struct LanguageSpec {
    pub id: LanguageId,
    /// First id covered by `permutation`; ids below it map to themselves.
    offset: u32,
    /// `permutation[t - offset]` is the image of token `t`.
    permutation: Vec<u32>,
    pub reorder_window: usize,
    /// Seed for the deterministic reordering stream.
    pub seed: u64,
}

impl LanguageSpec {
    pub fn new(
        id: LanguageId,
        offset: u32,
        permutation: Vec<u32>,
        reorder_window: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &img in &permutation {
            let Some(slot) = img
                .checked_sub(offset)
                .map(|v| v as usize)
                .filter(|&v| v < permutation.len())
            else {
                return Err(Error::InvalidArgument(format!(
                    "permutation not bijective: image {} outside range",
                    img
                )));
            };
            if seen[slot] {
                return Err(Error::InvalidArgument(format!(
                    "permutation not bijective: image {} repeated",
                    img
                )));
            }
            seen[slot] = true;
        }
        Ok(LanguageSpec {
            id,
            offset,
            permutation,
            reorder_window,
            seed,
        })
    }

    pub fn identity(id: LanguageId) -> Self {
        LanguageSpec {
            id,
            offset: CONTENT_START,
            permutation: Vec::new(),
            reorder_window: 0,
            seed: 0,
        }
    }

    pub fn map_token(&self, token: u32) -> u32 {
        match token.checked_sub(self.offset) {
            Some(i) if (i as usize) < self.permutation.len() => self.permutation[i as usize],
            _ => token,
        }
    }

    /// The inverse spec (window 0): applying it after `self` recovers the
    /// original tokens.
    pub fn inverse(&self, id: LanguageId) -> LanguageSpec {
        let mut inv = vec![0u32; self.permutation.len()];
        for (i, &img) in self.permutation.iter().enumerate() {
            inv[(img - self.offset) as usize] = self.offset + i as u32;
        }
        LanguageSpec {
            id,
            offset: self.offset,
            permutation: inv,
            reorder_window: 0,
            seed: 0,
        }
    }
}

/// Translate a pivot corpus into `spec`'s language: the source side is the
/// permuted and locally reordered sentence, the target side is the original
/// pivot sentence. Alignment (and corpus size) is preserved.
pub fn derive_language(
    pivot: &[TokenSequence],
    spec: &LanguageSpec,
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    let mut out = Vec::with_capacity(pivot.len());
    for (index, sent) in pivot.iter().enumerate() {
        let mut content: Vec<u32> = sent.content().iter().map(|&t| spec.map_token(t)).collect();
        if spec.reorder_window > 0 {
            local_reorder(&mut content, spec.reorder_window, spec.seed, index as u64);
        }
        let mut ids = Vec::with_capacity(sent.len());
        ids.push(super::BOS);
        ids.extend_from_slice(&content);
        ids.push(super::EOS);
        let src = TokenSequence::from_framed(ids, spec.id.clone(), sent.len().max(2))?;
        out.push((src, sent.clone()));
    }
    Ok(out)
}

/// `window` passes of alternating-parity adjacent swaps; each pass moves a
/// token at most one position, so total displacement is bounded by `window`.
fn local_reorder(tokens: &mut [u32], window: usize, seed: u64, sentence_index: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_55ed ^ sentence_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for pass in 0..window {
        let start = pass % 2;
        let mut k = start;
        while k + 1 < tokens.len() {
            if rng.random_range(0.0..1.0) < 0.5 {
                tokens.swap(k, k + 1);
            }
            k += 2;
        }
    }
}
