//! Temperature-based multilingual sampling and batch construction.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LanguageId, MultilingualCorpus, TokenSequence, PAD};
use crate::error::{Error, Result};

/// Per-language sampling proportions with temperature `alpha`.
///
/// The sampled distribution is `q_i = p_i^alpha / sum_j p_j^alpha`.
#[derive(Debug, Clone)]
pub struct SamplingPolicy {
    proportions: BTreeMap<LanguageId, f64>,
    alpha: f64,
}

impl SamplingPolicy {
    pub fn new(proportions: BTreeMap<LanguageId, f64>, alpha: f64) -> Result<Self> {
        if proportions.is_empty() {
            return Err(Error::InvalidArgument("no languages in sampling policy".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", alpha)));
        }
        let mut sum = 0.0;
        for (lang, &p) in &proportions {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "proportion for {} must be in (0, 1], got {}",
                    lang, p
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "proportions must sum to 1 within 1e-9, got {}",
                sum
            )));
        }
        Ok(SamplingPolicy { proportions, alpha })
    }

    /// Proportions by sentence count, the documented reading of "percentage
    /// of each language in the training dataset".
    pub fn from_corpus(corpus: &MultilingualCorpus, alpha: f64) -> Result<Self> {
        SamplingPolicy::new(corpus.proportions(), alpha)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn proportions(&self) -> &BTreeMap<LanguageId, f64> {
        &self.proportions
    }

    /// The temperature-adjusted multinomial `q`.
    pub fn distribution(&self) -> BTreeMap<LanguageId, f64> {
        let denom: f64 = self.proportions.values().map(|p| p.powf(self.alpha)).sum();
        self.proportions
            .iter()
            .map(|(lang, p)| (lang.clone(), p.powf(self.alpha) / denom))
            .collect()
    }

    /// Draw a language according to `q`.
    pub fn sample_language(&self, rng: &mut ChaCha8Rng) -> LanguageId {
        let q = self.distribution();
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut last = None;
        for (lang, qi) in &q {
            acc += qi;
            last = Some(lang);
            if u < acc {
                return lang.clone();
            }
        }
        last.expect("policy is non-empty").clone()
    }
}

/// Exact evaluation of the temperature-adjusted multinomial.
pub fn compute_sampling_distribution(policy: &SamplingPolicy) -> BTreeMap<LanguageId, f64> {
    policy.distribution()
}

/// A right-padded id matrix: `rows x width`, padded with [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PadMatrix {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl PadMatrix {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat_n(PAD, width - s.len()));
            lens.push(s.len());
        }
        Ok(PadMatrix {
            ids,
            rows: seqs.len(),
            width,
            lens,
        })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }
}

/// One sampled training batch; all sentences share a source language.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub lang: LanguageId,
    pub src: PadMatrix,
    pub tgt: PadMatrix,
}

/// Sample one batch: the language is drawn from the policy's `q`, sentences
/// uniformly within that language, and the batch grows until the padded
/// token count would exceed `batch_tokens`.
pub fn sample_batch(
    corpus: &MultilingualCorpus,
    policy: &SamplingPolicy,
    batch_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PaddedBatch> {
    let lang = policy.sample_language(rng);
    let pairs = corpus
        .pairs_for(&lang)
        .ok_or_else(|| Error::InvalidArgument(format!("policy language {} not in corpus", lang)))?;
    let mut chosen: Vec<&(TokenSequence, TokenSequence)> = Vec::new();
    let mut max_len = 0usize;
    loop {
        let pick = &pairs[rng.random_range(0..pairs.len())];
        let cand_len = max_len.max(pick.0.len()).max(pick.1.len());
        if !chosen.is_empty() && (chosen.len() + 1) * cand_len > batch_tokens {
            break;
        }
        if chosen.is_empty() && cand_len > batch_tokens {
            return Err(Error::InvalidArgument(format!(
                "batch_tokens {} smaller than longest sentence {}",
                batch_tokens, cand_len
            )));
        }
        max_len = cand_len;
        chosen.push(pick);
        if chosen.len() * max_len >= batch_tokens {
            break;
        }
    }
    let src: Vec<&TokenSequence> = chosen.iter().map(|p| &p.0).collect();
    let tgt: Vec<&TokenSequence> = chosen.iter().map(|p| &p.1).collect();
    Ok(PaddedBatch {
        lang,
        src: PadMatrix::from_sequences(&src)?,
        tgt: PadMatrix::from_sequences(&tgt)?,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::data::{encode_sentence, LanguageId};

    fn lang(tag: &str) -> LanguageId {
        LanguageId::new(tag).unwrap()
    }

    fn policy(entries: &[(&str, f64)], alpha: f64) -> SamplingPolicy {
        let map = entries
            .iter()
            .map(|(t, p)| (lang(t), *p))
            .collect::<BTreeMap<_, _>>();
        SamplingPolicy::new(map, alpha).unwrap()
    }

    #[test]
    fn uniform_proportions_stay_uniform_for_any_alpha() {
        for alpha in [0.01, 0.2, 1.0, 3.0] {
            let p = policy(&[("a", 1.0 / 3.0), ("b", 1.0 / 3.0), ("c", 1.0 / 3.0)], alpha);
            for q in p.distribution().values() {
                assert!((q - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_one_is_identity() {
        let p = policy(&[("a", 0.7), ("b", 0.2), ("c", 0.1)], 1.0);
        let q = p.distribution();
        assert!((q[&lang("a")] - 0.7).abs() < 1e-12);
        assert!((q[&lang("b")] - 0.2).abs() < 1e-12);
        assert!((q[&lang("c")] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn worked_example_nine_to_one() {
        let p = policy(&[("hi", 0.9), ("lo", 0.1)], 0.2);
        let q = p.distribution();
        assert!((q[&lang("hi")] - 0.608127).abs() < 1e-6, "{}", q[&lang("hi")]);
        assert!((q[&lang("lo")] - 0.391873).abs() < 1e-6, "{}", q[&lang("lo")]);
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let mut map = BTreeMap::new();
        map.insert(lang("a"), 0.0);
        map.insert(lang("b"), 1.0);
        assert!(SamplingPolicy::new(map.clone(), 0.2).is_err());
        map.insert(lang("a"), 0.5);
        assert!(SamplingPolicy::new(map.clone(), 0.2).is_err(), "sum 1.5");
        map.insert(lang("a"), 0.5);
        map.insert(lang("b"), 0.5);
        assert!(SamplingPolicy::new(map.clone(), 0.0).is_err(), "alpha 0");
        assert!(SamplingPolicy::new(map, 0.2).is_ok());
    }

    #[test]
    fn low_alpha_approaches_uniform() {
        let p = policy(&[("a", 0.97), ("b", 0.02), ("c", 0.01)], 1e-6);
        for q in p.distribution().values() {
            assert!((q - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn monotone_in_proportions() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|v| *v /= sum);
            let alpha = rng.random_range(0.01..4.0);
            let p = policy(
                &[("a", raw[0]), ("b", raw[1]), ("c", raw[2]), ("d", raw[3])],
                alpha,
            );
            let q = p.distribution();
            let langs = [lang("a"), lang("b"), lang("c"), lang("d")];
            for i in 0..4 {
                for j in 0..4 {
                    if raw[i] > raw[j] {
                        assert!(q[&langs[i]] > q[&langs[j]]);
                    }
                }
            }
            let total: f64 = q.values().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    fn tiny_corpus() -> MultilingualCorpus {
        let pv = lang("pv");
        let mk = |l: &LanguageId, start: u32, n: usize| {
            (0..n)
                .map(|i| {
                    let raw = vec![start + (i % 3) as u32, start + 1];
                    let src = encode_sentence(&raw, l.clone(), 16, 64).unwrap();
                    let tgt = encode_sentence(&raw, pv.clone(), 16, 64).unwrap();
                    (src, tgt)
                })
                .collect::<Vec<_>>()
        };
        let mut pairs = BTreeMap::new();
        let l1 = lang("l1");
        let l2 = lang("l2");
        pairs.insert(l1.clone(), mk(&l1, 10, 9));
        pairs.insert(l2.clone(), mk(&l2, 20, 1));
        MultilingualCorpus::new(pairs, pv).unwrap()
    }

    #[test]
    fn single_language_batches_come_from_it() {
        let corpus = tiny_corpus();
        let mut only = BTreeMap::new();
        only.insert(lang("l1"), corpus.pair_map()[&lang("l1")].clone());
        let corpus = MultilingualCorpus::new(only, lang("pv")).unwrap();
        let policy = SamplingPolicy::from_corpus(&corpus, 0.2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let batch = sample_batch(&corpus, &policy, 64, &mut rng).unwrap();
            assert_eq!(batch.lang, lang("l1"));
        }
    }

    #[test]
    fn batch_streams_are_deterministic_per_seed() {
        let corpus = tiny_corpus();
        let policy = SamplingPolicy::from_corpus(&corpus, 0.2).unwrap();
        let stream = |seed: u64| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_batch(&corpus, &policy, 32, &mut rng).unwrap())
                .map(|b| (b.lang, b.src.ids, b.tgt.ids))
                .collect::<Vec<_>>()
        };
        assert_eq!(stream(9), stream(9));
        assert_ne!(stream(9), stream(10));
    }

    #[test]
    fn empirical_language_frequencies_match_q() {
        // p = [0.9, 0.1], alpha = 0.2 -> q ~ [0.608, 0.392]; over 100k draws
        // the observed count must lie within 3 sigma of the binomial mean.
        let corpus = tiny_corpus();
        let policy = policy(&[("l1", 0.9), ("l2", 0.1)], 0.2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let n = 100_000usize;
        let mut hits = 0usize;
        for _ in 0..n {
            let batch = sample_batch(&corpus, &policy, 16, &mut rng).unwrap();
            if batch.lang == lang("l1") {
                hits += 1;
            }
        }
        let q = 0.6081267572685932_f64;
        let mean = q * n as f64;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        assert!(
            (hits as f64 - mean).abs() < 3.0 * sigma,
            "hits {} outside 3 sigma of {}",
            hits,
            mean
        );
    }

    #[test]
    fn batch_token_budget_is_respected() {
        let corpus = tiny_corpus();
        let policy = SamplingPolicy::from_corpus(&corpus, 0.2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let batch = sample_batch(&corpus, &policy, 13, &mut rng).unwrap();
            assert!(batch.src.rows * batch.src.width.max(batch.tgt.width) <= 13);
        }
        assert!(sample_batch(&corpus, &policy, 2, &mut rng).is_err());
    }
}
