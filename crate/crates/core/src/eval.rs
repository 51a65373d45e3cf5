//! Corpus BLEU over token-id streams and a cross-lingual sentence
//! retrieval probe over pooled encoder representations.

use std::collections::HashMap;

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{encode_pooled, ModelConfig, ModelState};

pub const MAX_NGRAM: usize = 4;

/// Corpus BLEU with n-gram precisions, brevity penalty and lengths.
#[derive(Debug, Clone)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// Machine-readable `metric<TAB>value` lines.
    pub fn metric_lines(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("bleu\t{:.4}\n", self.bleu));
        for (i, p) in self.precisions.iter().enumerate() {
            s.push_str(&format!("p{}\t{:.6}\n", i + 1, p));
        }
        s.push_str(&format!("bp\t{:.6}\n", self.brevity_penalty));
        s.push_str(&format!("hyp_len\t{}\n", self.hyp_len));
        s.push_str(&format!("ref_len\t{}\n", self.ref_len));
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "BLEU = {:.2} ({:.1}/{:.1}/{:.1}/{:.1}) BP = {:.3} hyp_len = {} ref_len = {}",
            self.bleu,
            self.precisions[0] * 100.0,
            self.precisions[1] * 100.0,
            self.precisions[2] * 100.0,
            self.precisions[3] * 100.0,
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut map: HashMap<&[u32], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_default() += 1;
        }
    }
    map
}

/// Corpus-level BLEU with clipped n-gram counts (n = 1..4), exponential
/// smoothing of zero-match orders (the k-th zero-match precision becomes
/// `1 / 2^k` scaled by its denominator) and brevity penalty
/// `min(1, exp(1 - ref_len / hyp_len))`. One reference per hypothesis.
pub fn corpus_bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_NGRAM];
    let mut totals = [0usize; MAX_NGRAM];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_NGRAM {
            if hyp.len() < n {
                continue;
            }
            totals[n - 1] += hyp.len() - n + 1;
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hyp, n);
            for (gram, count) in hyp_counts {
                if let Some(&rc) = ref_counts.get(gram) {
                    matches[n - 1] += count.min(rc);
                }
            }
        }
    }
    // Orders the corpus is too short to form at all are excluded from the
    // geometric mean (effective order), which keeps BLEU(x, x) at 100 even
    // for corpora of very short sentences.
    let mut precisions = [0.0; MAX_NGRAM];
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..MAX_NGRAM {
        if totals[n] == 0 {
            continue;
        }
        let p = if matches[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        precisions[n] = p;
        log_sum += p.ln();
        orders += 1;
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let geo = if orders == 0 {
        0.0
    } else {
        (log_sum / orders as f64).exp()
    };
    let bleu = (100.0 * brevity_penalty * geo).clamp(0.0, 100.0);
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// BLEU over the content tokens (frames stripped) of decoded sentences.
pub fn corpus_bleu_sequences(
    hypotheses: &[TokenSequence],
    references: &[TokenSequence],
) -> Result<BleuReport> {
    let h: Vec<Vec<u32>> = hypotheses.iter().map(|s| s.content().to_vec()).collect();
    let r: Vec<Vec<u32>> = references.iter().map(|s| s.content().to_vec()).collect();
    corpus_bleu(&h, &r)
}

/// Nearest-neighbour retrieval accuracy over a pool of parallel pairs.
#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub pool: usize,
}

impl RetrievalReport {
    pub fn metric_lines(&self) -> String {
        format!("retrieval_accuracy\t{:.6}\npool\t{}\n", self.accuracy, self.pool)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero-norm pooled vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Mean-pool encoder states of both sides; for every source-language
/// sentence find the cosine-nearest pivot sentence. A hit is the aligned one.
pub fn retrieval_accuracy(
    state: &ModelState,
    cfg: &ModelConfig,
    pairs: &[(TokenSequence, TokenSequence)],
) -> Result<RetrievalReport> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(
            "retrieval needs at least two pairs".into(),
        ));
    }
    let sources: Vec<TokenSequence> = pairs.iter().map(|p| p.0.clone()).collect();
    let pivots: Vec<TokenSequence> = pairs.iter().map(|p| p.1.clone()).collect();
    let src_vecs = encode_pooled(state, cfg, &sources)?;
    let piv_vecs = encode_pooled(state, cfg, &pivots)?;
    let mut hits = 0usize;
    for (i, sv) in src_vecs.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, pv) in piv_vecs.iter().enumerate() {
            let sim = cosine(sv, pv)?;
            if sim > best.0 {
                best = (sim, j);
            }
        }
        if best.1 == i {
            hits += 1;
        }
    }
    Ok(RetrievalReport {
        accuracy: hits as f64 / pairs.len() as f64,
        pool: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[u32]) -> Vec<u32> {
        s.to_vec()
    }

    #[test]
    fn identical_corpora_score_100() {
        let h = vec![toks(&[8, 9, 10, 11]), toks(&[12, 13])];
        let r = h.clone();
        let report = corpus_bleu(&h, &r).unwrap();
        assert_eq!(report.bleu, 100.0);
        assert_eq!(report.brevity_penalty, 1.0);
    }

    /// The worked case: hyp "a b c d" vs ref "a b x d".
    /// p1 = 3/4, p2 = 1/3, p3 = 0/2 -> 1/(2*2), p4 = 0/1 -> 1/(4*1), BP = 1.
    /// BLEU = 100 * (3/4 * 1/3 * 1/4 * 1/4)^(1/4) = 35.355339.
    #[test]
    fn worked_hand_count_example() {
        let h = vec![toks(&[10, 11, 12, 13])];
        let r = vec![toks(&[10, 11, 99, 13])];
        let report = corpus_bleu(&h, &r).unwrap();
        assert!((report.precisions[0] - 0.75).abs() < 1e-12);
        assert!((report.precisions[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.precisions[2] - 0.25).abs() < 1e-12, "first zero order: 1/(2*2)");
        assert!((report.precisions[3] - 0.25).abs() < 1e-12, "second zero order: 1/(4*1)");
        assert_eq!(report.brevity_penalty, 1.0);
        assert!((report.bleu - 35.35533905932737).abs() < 1e-9, "{}", report.bleu);
    }

    #[test]
    fn brevity_penalty_for_short_hypotheses() {
        // hyp len 3, ref len 4 -> BP = exp(1 - 4/3); the hypothesis is too
        // short for any 4-gram, so that order is excluded from the mean and
        // the perfect lower orders leave BLEU = 100 * BP.
        let h = vec![toks(&[10, 11, 12])];
        let r = vec![toks(&[10, 11, 12, 13])];
        let report = corpus_bleu(&h, &r).unwrap();
        let expected_bp = (1.0_f64 - 4.0 / 3.0).exp();
        assert!((report.brevity_penalty - expected_bp).abs() < 1e-12);
        assert_eq!(report.precisions[3], 0.0, "absent order is reported as 0");
        assert!((report.bleu - 100.0 * expected_bp).abs() < 1e-9);
    }

    #[test]
    fn clipping_counts_repeated_tokens() {
        // hyp "a a a a" vs ref "a a": unigram matches clipped to 2.
        let h = vec![toks(&[10, 10, 10, 10])];
        let r = vec![toks(&[10, 10])];
        let report = corpus_bleu(&h, &r).unwrap();
        assert!((report.precisions[0] - 0.5).abs() < 1e-12);
        assert!(
            (report.precisions[1] - 1.0 / 3.0).abs() < 1e-12,
            "bigram (a,a) clipped to the single reference occurrence"
        );
    }

    #[test]
    fn corpus_counts_aggregate_over_sentences() {
        let h = vec![toks(&[10, 11]), toks(&[12, 13, 14])];
        let r = vec![toks(&[10, 11]), toks(&[12, 99, 14])];
        let report = corpus_bleu(&h, &r).unwrap();
        // p1 = (2 + 2) / (2 + 3); p2 = (1 + 0) / (1 + 2).
        assert!((report.precisions[0] - 4.0 / 5.0).abs() < 1e-12);
        assert!((report.precisions[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn jointly_permuting_pairs_leaves_the_score_unchanged() {
        let h = vec![toks(&[10, 11, 12]), toks(&[13, 14]), toks(&[15, 16, 17, 18])];
        let r = vec![toks(&[10, 99, 12]), toks(&[13, 14]), toks(&[15, 16, 12, 18])];
        let a = corpus_bleu(&h, &r).unwrap();
        let perm = [2usize, 0, 1];
        let hp: Vec<Vec<u32>> = perm.iter().map(|&i| h[i].clone()).collect();
        let rp: Vec<Vec<u32>> = perm.iter().map(|&i| r[i].clone()).collect();
        let b = corpus_bleu(&hp, &rp).unwrap();
        assert_eq!(a.bleu.to_bits(), b.bleu.to_bits());
    }

    #[test]
    fn error_cases() {
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(corpus_bleu(&[toks(&[1])], &[]).is_err());
    }

    #[test]
    fn bleu_stays_in_range_and_self_bleu_is_100() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                (0..n)
                    .map(|_| {
                        let len = rng.random_range(1..8);
                        (0..len).map(|_| rng.random_range(8u32..16)).collect::<Vec<u32>>()
                    })
                    .collect::<Vec<_>>()
            };
            let h = mk(&mut rng);
            let r = mk(&mut rng);
            let report = corpus_bleu(&h, &r).unwrap();
            assert!((0.0..=100.0).contains(&report.bleu));
            let self_report = corpus_bleu(&h, &h).unwrap();
            assert_eq!(self_report.bleu, 100.0);
        }
    }
}
