//! Training integration: freeze exactness, determinism, masked-LM
//! behaviour, and smoke-level learning.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{derive_language, Grammar, GrammarConfig, LanguageId, PadMatrix};
use crate::model::EMBED_TOKENS;

fn lang(tag: &str) -> LanguageId {
    LanguageId::new(tag).unwrap()
}

fn tiny_grammar() -> Grammar {
    Grammar::new(GrammarConfig {
        vocab_size: 96,
        anchor_count: 8,
        tokens_per_class: 8,
        anchor_prob: 0.5,
        affinity: 0.8,
        min_len: 3,
        max_len: 7,
    })
    .unwrap()
}

fn tiny_model_cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 1,
        d_model: 32,
        enc_ffn: 64,
        dec_ffn: 64,
        heads: 2,
        pde_enabled: false,
        pde_layer: 1,
        dropout: 0.1,
        vocab_size: vocab,
        max_positions: 16,
        n_target_langs: 1,
    }
}

/// A bilingual toy corpus (l1 -> pivot) with a held-out validation slice.
fn tiny_corpus(
    n_train: usize,
    n_valid: usize,
) -> (MultilingualCorpus, Vec<(TokenSequence, TokenSequence)>) {
    let grammar = tiny_grammar();
    let pivot = grammar
        .generate_pivot(400, n_train + n_valid, &lang("pv"), 16)
        .unwrap();
    let spec = grammar.language_spec(lang("l1"), 1, 1, 5).unwrap();
    let pairs = derive_language(&pivot, &spec).unwrap();
    let (train, valid) = pairs.split_at(n_train);
    let mut map = BTreeMap::new();
    map.insert(lang("l1"), train.to_vec());
    (
        MultilingualCorpus::new(map, lang("pv")).unwrap(),
        valid.to_vec(),
    )
}

fn quick_opts(dir: Option<std::path::PathBuf>) -> TrainerOptions {
    TrainerOptions {
        optimizer: OptimizerConfig {
            warmup_steps: 20,
            ..OptimizerConfig::default()
        },
        out_dir: dir,
        ..TrainerOptions::default()
    }
}

#[test]
fn transf_freezes_encoder_in_stage1_and_embeddings_throughout() {
    let (train, valid) = tiny_corpus(120, 16);
    let cfg = tiny_model_cfg(96);
    let mut state = ModelState::init(&cfg, 7, None).unwrap();
    let policy = SamplingPolicy::from_corpus(&train, 0.2).unwrap();
    let init_payloads = payload_bytes(&state);

    // Stage 1 only: every encoder tensor and embedding is untouched.
    let stages = [TrainStageConfig {
        stage: TrainingStage::Stage1,
        steps: 12,
        batch_tokens: 128,
        pde_enabled_this_stage: false,
    }];
    train_stages(
        &mut state, &cfg, &train, &valid, &policy, &stages, &quick_opts(None), 11, 0,
    )
    .unwrap();
    let after1 = payload_bytes(&state);
    let mut decoder_moved = false;
    for (name, bytes) in &init_payloads {
        if name.starts_with("enc.") || name.starts_with("embed.") {
            assert_eq!(bytes, &after1[name], "{} must be byte-identical", name);
        } else if bytes != &after1[name] {
            decoder_moved = true;
        }
    }
    assert!(decoder_moved, "stage 1 must actually train the decoder");

    // Stage 2: encoder moves, embeddings still byte-identical.
    let stages = [TrainStageConfig {
        stage: TrainingStage::Stage2,
        steps: 12,
        batch_tokens: 128,
        pde_enabled_this_stage: true,
    }];
    train_stages(
        &mut state, &cfg, &train, &valid, &policy, &stages, &quick_opts(None), 12, 0,
    )
    .unwrap();
    let after2 = payload_bytes(&state);
    assert_eq!(init_payloads[EMBED_TOKENS], after2[EMBED_TOKENS]);
    assert_eq!(init_payloads["embed.pos"], after2["embed.pos"]);
    let encoder_moved = init_payloads
        .iter()
        .filter(|(n, _)| n.starts_with("enc."))
        .any(|(n, b)| b != &after2[n]);
    assert!(encoder_moved, "stage 2 must train the encoder");
}

#[test]
fn training_is_deterministic_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let run = |dir: &std::path::Path| {
        let (train, valid) = tiny_corpus(80, 12);
        let cfg = tiny_model_cfg(96);
        let mut state = ModelState::init(&cfg, 3, None).unwrap();
        let policy = SamplingPolicy::from_corpus(&train, 0.2).unwrap();
        let outcome = train_transf(
            &mut state,
            &cfg,
            &train,
            &valid,
            &policy,
            10,
            6,
            128,
            true,
            &quick_opts(Some(dir.to_path_buf())),
            99,
        )
        .unwrap();
        let last = outcome.stages[1].checkpoints.last().unwrap().clone();
        (std::fs::read(last).unwrap(), outcome.log)
    };
    let (bytes_a, log_a) = run(dir_a.path());
    let (bytes_b, log_b) = run(dir_b.path());
    assert_eq!(bytes_a, bytes_b, "final checkpoints must be byte-identical");
    assert_eq!(log_a, log_b, "training logs must be byte-identical");
}

#[test]
fn ft_all_moves_every_parameter() {
    let (train, valid) = tiny_corpus(120, 16);
    let cfg = tiny_model_cfg(96);
    let mut state = ModelState::init(&cfg, 5, None).unwrap();
    let policy = SamplingPolicy::from_corpus(&train, 0.2).unwrap();
    let before = payload_bytes(&state);
    train_ft_all(
        &mut state, &cfg, &train, &valid, &policy, 100, 128, &quick_opts(None), 21,
    )
    .unwrap();
    let after = payload_bytes(&state);
    for (name, bytes) in &before {
        assert_ne!(bytes, &after[name], "{} should have moved", name);
    }
}

#[test]
fn stage2_validation_improves_on_stage1_final() {
    let (train, valid) = tiny_corpus(400, 40);
    let cfg = tiny_model_cfg(96);
    // Pretrain briefly so the frozen encoder is not pure noise.
    let grammar = tiny_grammar();
    let mono: BTreeMap<LanguageId, Vec<TokenSequence>> = [
        (lang("pv"), grammar.generate_pivot(41, 300, &lang("pv"), 16).unwrap()),
        (
            lang("l1"),
            derive_language(
                &grammar.generate_pivot(42, 300, &lang("pv"), 16).unwrap(),
                &grammar.language_spec(lang("l1"), 1, 1, 5).unwrap(),
            )
            .unwrap()
            .into_iter()
            .map(|p| p.0)
            .collect(),
        ),
    ]
    .into_iter()
    .collect();
    let mlm_cfg = MlmConfig {
        steps: 60,
        ..MlmConfig::new(60, 128, grammar.content_range())
    };
    let pre = pretrain_mlm(&cfg, &mono, &mlm_cfg, &OptimizerConfig::default(), 5).unwrap();
    let snapshot = pre.state.encoder_snapshot();
    let mut state = ModelState::init(&cfg, 5, Some(&snapshot)).unwrap();
    let policy = SamplingPolicy::from_corpus(&train, 0.2).unwrap();
    let outcome = train_transf(
        &mut state,
        &cfg,
        &train,
        &valid,
        &policy,
        150,
        80,
        128,
        true,
        &quick_opts(None),
        31,
    )
    .unwrap();
    let v1 = outcome.stages[0].final_valid_loss.unwrap();
    let v2 = outcome.stages[1].final_valid_loss.unwrap();
    assert!(
        v2 <= v1,
        "stage 2 validation {} should not exceed stage 1 final {}",
        v2,
        v1
    );
}

#[test]
fn mlm_loss_only_sees_selected_positions() {
    let grammar = tiny_grammar();
    let sents = grammar.generate_pivot(8, 4, &lang("pv"), 16).unwrap();
    let refs: Vec<&TokenSequence> = sents.iter().collect();
    let batch = PadMatrix::from_sequences(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (masked, targets) = mask_batch(&batch, 0.3, &grammar.content_range(), &mut rng).unwrap();
    assert!(targets.iter().any(|&t| t != u32::MAX), "something selected");
    // Perturbing logits at unselected positions must leave the loss unchanged.
    let cfg = tiny_model_cfg(96);
    let state = ModelState::init(&cfg, 9, None).unwrap();
    let logits_loss = |perturb: bool| {
        let mut graph = crate::autograd::Graph::new();
        let logits = {
            let mut fw = Forward::new(&mut graph, &state, 0.0, Mode::Eval);
            let enc = crate::model::encode(&mut fw, &cfg, &masked).unwrap();
            let tokens = fw.p(EMBED_TOKENS).unwrap();
            fw.graph.matmul_bt(enc.hidden, tokens).unwrap()
        };
        let mut values = graph.value(logits).clone();
        if perturb {
            let v = cfg.vocab_size;
            for (pos, &t) in targets.iter().enumerate() {
                if t == u32::MAX {
                    for x in &mut values.data_mut()[pos * v..(pos + 1) * v] {
                        *x += 3.5;
                    }
                }
            }
        }
        let mut g2 = crate::autograd::Graph::new();
        let leaf = g2.leaf(values).unwrap();
        let loss = g2.cross_entropy(leaf, targets.clone(), u32::MAX).unwrap();
        g2.value(loss).item().unwrap()
    };
    assert_eq!(logits_loss(false).to_bits(), logits_loss(true).to_bits());
}

#[test]
fn mask_batch_rejects_zero_ratio_and_respects_special_tokens() {
    let grammar = tiny_grammar();
    let sents = grammar.generate_pivot(8, 6, &lang("pv"), 16).unwrap();
    let refs: Vec<&TokenSequence> = sents.iter().collect();
    let batch = PadMatrix::from_sequences(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert!(matches!(
        mask_batch(&batch, 0.0, &grammar.content_range(), &mut rng),
        Err(Error::EmptyLoss)
    ));
    let (masked, targets) = mask_batch(&batch, 1.0, &grammar.content_range(), &mut rng).unwrap();
    for (i, (&orig, &new)) in batch.ids.iter().zip(&masked.ids).enumerate() {
        use crate::data::{BOS, EOS, PAD};
        if orig == PAD || orig == BOS || orig == EOS {
            assert_eq!(orig, new, "special tokens are never corrupted");
            assert_eq!(targets[i], u32::MAX);
        } else {
            assert_eq!(targets[i], orig, "ratio 1.0 selects every content token");
        }
    }
}

#[test]
fn mlm_pretraining_is_deterministic_and_beats_chance() {
    let grammar = tiny_grammar();
    let cfg = tiny_model_cfg(96);
    let mono: BTreeMap<LanguageId, Vec<TokenSequence>> = [(
        lang("pv"),
        grammar.generate_pivot(11, 400, &lang("pv"), 16).unwrap(),
    )]
    .into_iter()
    .collect();
    let mlm_cfg = MlmConfig::new(150, 128, grammar.content_range());
    let opt = OptimizerConfig::default();
    let a = pretrain_mlm(&cfg, &mono, &mlm_cfg, &opt, 13).unwrap();
    let b = pretrain_mlm(&cfg, &mono, &mlm_cfg, &opt, 13).unwrap();
    let ck_a = checkpoint_bytes(&mlm::encoder_checkpoint(&a.state, &cfg, 150, 13)).unwrap();
    let ck_b = checkpoint_bytes(&mlm::encoder_checkpoint(&b.state, &cfg, 150, 13)).unwrap();
    assert_eq!(ck_a, ck_b, "same seed gives identical checkpoint bytes");

    let heldout = grammar.generate_pivot(9999, 80, &lang("pv"), 16).unwrap();
    let acc = mlm_accuracy(&a.state, &cfg, &heldout, 0.15, &grammar.content_range(), 3).unwrap();
    let chance = 5.0 / 96.0; // five times the uniform-vocabulary rate
    assert!(
        acc > chance,
        "masked accuracy {} should beat 5x chance {}",
        acc,
        chance
    );
}

#[test]
fn frozen_moments_stay_zero_through_training() {
    let (train, valid) = tiny_corpus(60, 8);
    let cfg = tiny_model_cfg(96);
    let mut state = ModelState::init(&cfg, 7, None).unwrap();
    let policy = SamplingPolicy::from_corpus(&train, 0.2).unwrap();
    let partition = partition_for_stage(&state, TrainingStage::Stage1);
    let mut moments = AdamState::new(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for step in 1..=5 {
        let batch = sample_batch(&train, &policy, 128, &mut rng).unwrap();
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
            nll_node(&mut fw, &cfg, &batch.src, &batch.tgt, 0).unwrap()
        };
        let mut grads = graph.backward(loss).unwrap();
        drop(graph);
        clip_gradients(&mut grads, 1.0);
        adam_step(&mut state, &mut moments, &grads, &partition, step, 1e-3, &OptimizerConfig::default()).unwrap();
    }
    for name in &partition.frozen {
        assert!(moments.m[name].data().iter().all(|&v| v == 0.0), "{}", name);
        assert!(moments.v[name].data().iter().all(|&v| v == 0.0), "{}", name);
    }
    let _ = valid;
}

#[test]
fn validation_is_repeatable_in_eval_mode() {
    let (train, valid) = tiny_corpus(40, 10);
    let cfg = tiny_model_cfg(96);
    let state = ModelState::init(&cfg, 7, None).unwrap();
    let a = evaluate_nll(&state, &cfg, &valid, 128, 0).unwrap();
    let b = evaluate_nll(&state, &cfg, &valid, 128, 0).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let _ = train;
}

#[test]
fn checkpoint_roundtrip_through_state_restores_payloads() {
    let cfg = tiny_model_cfg(96);
    let state = ModelState::init(&cfg, 7, None).unwrap();
    let ckpt = snapshot(&state, &cfg, 3, 7);
    let restored = state_from_checkpoint(&ckpt).unwrap();
    for (name, t) in state.params() {
        assert_eq!(
            t.to_f32_le_bytes(),
            restored.get(name).unwrap().to_f32_le_bytes(),
            "{}",
            name
        );
    }
}
