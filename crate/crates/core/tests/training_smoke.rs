//! Smoke-level learning checks: a tiny model must master the copy task
//! quickly, both in likelihood and through beam-search reconstruction.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use zsmt_core::data::{Grammar, GrammarConfig, LanguageId, MultilingualCorpus, TokenSequence};
use zsmt_core::decode::{translate_corpus, DecodeConfig};
use zsmt_core::data::SamplingPolicy;
use zsmt_core::model::{sequence_nll, ModelConfig, ModelState};
use zsmt_core::trainer::{train_ft_all, OptimizerConfig, TrainerOptions};

struct CopyWorld {
    cfg: ModelConfig,
    state: ModelState,
    train: Vec<(TokenSequence, TokenSequence)>,
    test: Vec<TokenSequence>,
}

fn lang(tag: &str) -> LanguageId {
    LanguageId::new(tag).unwrap()
}

/// Train one small copy model (source equals target) for 200 steps.
fn copy_world() -> &'static CopyWorld {
    static WORLD: OnceLock<CopyWorld> = OnceLock::new();
    WORLD.get_or_init(|| {
        let grammar = Grammar::new(GrammarConfig {
            vocab_size: 64,
            anchor_count: 8,
            tokens_per_class: 8,
            anchor_prob: 0.5,
            affinity: 0.8,
            min_len: 3,
            max_len: 6,
        })
        .unwrap();
        let pivot = lang("pv");
        let sentences = grammar.generate_pivot(51, 1100, &pivot, 16).unwrap();
        let pairs: Vec<(TokenSequence, TokenSequence)> = sentences
            .iter()
            .take(1000)
            .map(|s| (s.clone(), s.clone()))
            .collect();
        let valid: Vec<(TokenSequence, TokenSequence)> = sentences
            .iter()
            .skip(1000)
            .take(50)
            .map(|s| (s.clone(), s.clone()))
            .collect();
        let test: Vec<TokenSequence> = sentences.iter().skip(1050).cloned().collect();
        let corpus = MultilingualCorpus::new(
            BTreeMap::from([(pivot.clone(), pairs.clone())]),
            pivot,
        )
        .unwrap();
        let policy = SamplingPolicy::from_corpus(&corpus, 0.2).unwrap();
        let cfg = ModelConfig {
            enc_layers: 2,
            dec_layers: 1,
            d_model: 32,
            enc_ffn: 64,
            dec_ffn: 64,
            heads: 2,
            pde_enabled: false,
            pde_layer: 1,
            dropout: 0.1,
            vocab_size: 64,
            max_positions: 16,
            n_target_langs: 1,
        };
        let mut state = ModelState::init(&cfg, 77, None).unwrap();
        let opts = TrainerOptions {
            optimizer: OptimizerConfig {
                lr_stage1: 3e-3,
                warmup_steps: 20,
                ..OptimizerConfig::default()
            },
            ..TrainerOptions::default()
        };
        train_ft_all(&mut state, &cfg, &corpus, &valid, &policy, 200, 192, &opts, 7).unwrap();
        CopyWorld {
            cfg,
            state,
            train: pairs,
            test,
        }
    })
}

#[test]
fn copy_task_reaches_low_nll_in_200_steps() {
    let world = copy_world();
    let mut total = 0.0;
    let sample = &world.train[..50];
    for (src, tgt) in sample {
        total += sequence_nll(&world.state, &world.cfg, src, tgt, 0).unwrap();
    }
    let mean = total / sample.len() as f64;
    assert!(mean < 0.5, "copy NLL {} after 200 steps", mean);
}

#[test]
fn copy_model_reconstructs_95_percent_exactly() {
    let world = copy_world();
    let dcfg = DecodeConfig {
        beam_size: 2,
        max_decode_length: 12,
        length_penalty: 1.0,
    };
    let decoded = translate_corpus(
        &world.state,
        &world.cfg,
        &world.test,
        &lang("pv"),
        0,
        &dcfg,
    )
    .unwrap();
    let exact = decoded
        .iter()
        .zip(&world.test)
        .filter(|(d, src)| d.seq.ids == src.ids)
        .count();
    let rate = exact as f64 / world.test.len() as f64;
    assert!(
        rate >= 0.95,
        "exact-match reconstruction {:.3} below 95% ({}/{})",
        rate,
        exact,
        world.test.len()
    );
}
