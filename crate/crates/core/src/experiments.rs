//! Desk-scale ablation harness: multilinguality of the auxiliary data, the
//! positional-disentangled encoder, the two-stage recipe against baselines,
//! and one-round back-translation. Arms within one ablation share corpus
//! seeds and data budgets so only the studied factor varies. Seeds run as
//! independent parallel tasks and merge deterministically in seed order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::{ExperimentSettings, RunConfig};
use crate::data::{
    derive_language, Grammar, LanguageId, MultilingualCorpus, SamplingPolicy, TokenSequence,
};
use crate::decode::{translate_corpus, ModelTranslator};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu_sequences, retrieval_accuracy};
use crate::model::{ModelConfig, ModelState};
use crate::trainer::{
    build_backtranslation_corpus, pretrain_mlm, train_ft_all, train_reverse, train_transf,
    MlmConfig, TrainerOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Multilinguality,
    Pde,
    TransfVsFtall,
    Backtranslation,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "multilinguality" => Ok(ExperimentKind::Multilinguality),
            "pde" => Ok(ExperimentKind::Pde),
            "transf_vs_ftall" => Ok(ExperimentKind::TransfVsFtall),
            "backtranslation" => Ok(ExperimentKind::Backtranslation),
            _ => Err(Error::Config(format!(
                "unknown experiment {:?} (expected multilinguality, pde, transf_vs_ftall or backtranslation)",
                name
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ExperimentKind::Multilinguality => "multilinguality",
            ExperimentKind::Pde => "pde",
            ExperimentKind::TransfVsFtall => "transf_vs_ftall",
            ExperimentKind::Backtranslation => "backtranslation",
        }
    }
}

/// A fully resolved experiment description: corpus recipe, model, stages,
/// seeds and metrics all come from one [`RunConfig`].
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
}

/// The shipped desk-scale base configuration; the acceptance suite and the
/// example spec files share it.
pub const DESK_BASE_CFG: &str = include_str!("../../../configs/experiment_base.cfg");

impl ExperimentSpec {
    /// The desk-scale spec for one experiment: built-in defaults plus the
    /// shipped base configuration, three seeds.
    pub fn desk_default(kind: ExperimentKind) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(DESK_BASE_CFG, "experiment_base.cfg")?;
        config.experiment.name = kind.label().to_string();
        ExperimentSpec::from_config(config)
    }

    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let kind = ExperimentKind::parse(&config.experiment.name)?;
        let seeds = config.experiment.seed_list()?;
        Ok(ExperimentSpec { kind, seeds, config })
    }
}

/// One tab-separated report row.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub arm: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Deterministic experiment report: rows in (seed, arm) emission order plus
/// named aggregates and a human-readable summary block.
#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn aggregate(&self, arm: &str, metric: &str) -> f64 {
        let values = self.values(arm, metric);
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    pub fn values(&self, arm: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.arm == arm && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "experiment\t{}", self.name);
        let _ = writeln!(out, "arm\tseed\tmetric\tvalue");
        for row in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6}", row.arm, row.seed, row.metric, row.value);
        }
        let _ = writeln!(out, "\n# summary");
        for (key, value) in &self.summary {
            let _ = writeln!(out, "{}\t{:.6}", key, value);
        }
        for note in &self.notes {
            let _ = writeln!(out, "# {}", note);
        }
        out
    }
}

/// Rows produced by one seed's task, merged in seed order.
#[derive(Default)]
struct SeedRows {
    rows: Vec<ReportRow>,
}

impl SeedRows {
    fn push(&mut self, arm: &str, seed: u64, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            arm: arm.to_string(),
            seed,
            metric: metric.to_string(),
            value,
        });
    }
}

/// All per-seed data slices used by the ablations. Every language draws its
/// sentences from a disjoint region of one pivot stream so that parallel
/// corpora of different languages are not mutual translations of each other.
pub struct SeedData {
    pub grammar: Grammar,
    pub pivot: LanguageId,
    /// Parallel training pools per language (up to `train_pairs_per_lang`).
    pub train_pools: BTreeMap<LanguageId, Vec<(TokenSequence, TokenSequence)>>,
    /// Per-language validation slices.
    pub valid: BTreeMap<LanguageId, Vec<(TokenSequence, TokenSequence)>>,
    /// Held-out test sets per language (source lang -> pivot).
    pub test: BTreeMap<LanguageId, Vec<(TokenSequence, TokenSequence)>>,
    /// Monolingual data per language (pivot included) for pretraining.
    pub mono: BTreeMap<LanguageId, Vec<TokenSequence>>,
    /// Extra monolingual slices of the back-translation language.
    pub bt_train_mono: Vec<TokenSequence>,
    pub bt_round_trip_mono: Vec<TokenSequence>,
}

fn lang_id(tag: &str) -> Result<LanguageId> {
    LanguageId::new(tag)
}

/// Build every corpus slice for one seed. Slices are carved from a single
/// deterministic pivot stream; arms of an ablation reuse the same SeedData.
pub fn build_seed_data(config: &RunConfig, seed: u64) -> Result<SeedData> {
    let grammar = Grammar::new(config.data.grammar_config())?;
    let pivot = lang_id(&config.data.pivot)?;
    let langs = config.data.language_list()?;
    if langs.len() + 1 > grammar.max_blocks() {
        return Err(Error::Config(format!(
            "vocab {} holds {} language blocks, {} requested",
            config.data.vocab_size,
            grammar.max_blocks(),
            langs.len() + 1
        )));
    }
    let d = &config.data;
    let per_lang = d.train_pairs_per_lang + d.valid_pairs_per_lang + d.test_pairs_per_lang + d.mono_per_lang;
    let bt_extra = config.experiment.bt_mono + config.experiment.round_trip_sentences;
    let total = per_lang * langs.len() + d.mono_per_lang + bt_extra;
    let max_len = config.data.max_source_length;
    let stream = grammar.generate_pivot(seed, total, &pivot, max_len)?;
    let mut cursor = 0usize;
    let mut take = |n: usize| {
        let slice = stream[cursor..cursor + n].to_vec();
        cursor += n;
        slice
    };

    let mut train_pools = BTreeMap::new();
    let mut valid = BTreeMap::new();
    let mut test = BTreeMap::new();
    let mut mono = BTreeMap::new();
    let bt_lang = lang_id(&config.experiment.bt_lang)?;
    let mut bt_train_mono = Vec::new();
    let mut bt_round_trip_mono = Vec::new();
    for (block, (tag, window)) in langs.iter().enumerate() {
        let id = lang_id(tag)?;
        let spec = grammar.language_spec(id.clone(), block + 1, *window, seed ^ 0xa5a5)?;
        let train_slice = take(d.train_pairs_per_lang);
        let valid_slice = take(d.valid_pairs_per_lang);
        let test_slice = take(d.test_pairs_per_lang);
        let mono_slice = take(d.mono_per_lang);
        train_pools.insert(id.clone(), derive_language(&train_slice, &spec)?);
        valid.insert(id.clone(), derive_language(&valid_slice, &spec)?);
        test.insert(id.clone(), derive_language(&test_slice, &spec)?);
        mono.insert(
            id.clone(),
            derive_language(&mono_slice, &spec)?.into_iter().map(|p| p.0).collect(),
        );
        if id == bt_lang {
            let bt_train = take(config.experiment.bt_mono);
            let bt_rt = take(config.experiment.round_trip_sentences);
            bt_train_mono = derive_language(&bt_train, &spec)?.into_iter().map(|p| p.0).collect();
            bt_round_trip_mono = derive_language(&bt_rt, &spec)?.into_iter().map(|p| p.0).collect();
        }
    }
    mono.insert(pivot.clone(), take(d.mono_per_lang));
    Ok(SeedData {
        grammar,
        pivot,
        train_pools,
        valid,
        test,
        mono,
        bt_train_mono,
        bt_round_trip_mono,
    })
}

/// Per-seed artifacts cached across experiments run from one configuration.
/// Reuse a cache only with the configuration that filled it.
#[derive(Default)]
pub struct ArtifactCache {
    mlm: BTreeMap<u64, ModelState>,
    transf: BTreeMap<u64, ModelState>,
}

impl ArtifactCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Artifacts carried by one seed's task.
#[derive(Default, Clone)]
struct SeedArtifacts {
    mlm: Option<ModelState>,
    transf: Option<ModelState>,
}

struct Harness<'a> {
    spec: &'a ExperimentSpec,
}

impl Harness<'_> {
    fn cfg(&self) -> &RunConfig {
        &self.spec.config
    }

    fn aux_langs(&self) -> Result<Vec<LanguageId>> {
        ExperimentSettings::lang_list(&self.cfg().experiment.aux_langs)
            .iter()
            .map(|t| lang_id(t))
            .collect()
    }

    fn heldout_langs(&self) -> Result<Vec<LanguageId>> {
        ExperimentSettings::lang_list(&self.cfg().experiment.heldout_langs)
            .iter()
            .map(|t| lang_id(t))
            .collect()
    }

    fn trainer_options(&self) -> TrainerOptions {
        TrainerOptions {
            optimizer: self.cfg().optimizer.clone(),
            label_smoothing: self.cfg().train.label_smoothing,
            checkpoint_interval: self.cfg().train.checkpoint_interval,
            valid_interval: self.cfg().train.valid_interval,
            out_dir: None,
        }
    }

    fn mlm_config(&self, grammar: &Grammar) -> MlmConfig {
        let t = &self.cfg().train;
        MlmConfig {
            steps: t.mlm_steps,
            batch_tokens: t.mlm_batch_tokens,
            mask_ratio: t.mlm_mask_ratio,
            lr: t.mlm_lr,
            warmup: t.mlm_warmup,
            alpha: t.alpha,
            content_range: grammar.content_range(),
        }
    }

    /// The shared pretrained encoder for one seed.
    fn pretrained(&self, art: &mut SeedArtifacts, data: &SeedData, seed: u64) -> Result<ModelState> {
        if let Some(state) = &art.mlm {
            return Ok(state.clone());
        }
        let outcome = pretrain_mlm(
            &self.cfg().model,
            &data.mono,
            &self.mlm_config(&data.grammar),
            &self.cfg().optimizer,
            seed,
        )?;
        art.mlm = Some(outcome.state.clone());
        Ok(outcome.state)
    }

    /// Build a training corpus over `langs` with `budget` pairs split evenly.
    fn corpus_with_budget(
        &self,
        data: &SeedData,
        langs: &[LanguageId],
        budget: usize,
    ) -> Result<MultilingualCorpus> {
        let per = budget / langs.len();
        if per == 0 {
            return Err(Error::Config(format!(
                "budget {} too small for {} languages",
                budget,
                langs.len()
            )));
        }
        let mut map = BTreeMap::new();
        for l in langs {
            let pool = data
                .train_pools
                .get(l)
                .ok_or_else(|| Error::Config(format!("no training pool for {}", l)))?;
            if pool.len() < per {
                return Err(Error::Config(format!(
                    "training pool for {} has {} pairs, {} requested",
                    l,
                    pool.len(),
                    per
                )));
            }
            map.insert(l.clone(), pool[..per].to_vec());
        }
        MultilingualCorpus::new(map, data.pivot.clone())
    }

    /// Concatenated validation pairs of the corpus languages.
    fn valid_concat(&self, data: &SeedData, langs: &[LanguageId]) -> Vec<(TokenSequence, TokenSequence)> {
        let mut out = Vec::new();
        for l in langs {
            if let Some(v) = data.valid.get(l) {
                out.extend(v.iter().cloned());
            }
        }
        out
    }

    /// Zero-shot BLEU of a model over the held-out languages, averaged.
    fn zero_shot_bleu(
        &self,
        state: &ModelState,
        cfg: &ModelConfig,
        data: &SeedData,
        langs: &[LanguageId],
    ) -> Result<f64> {
        let mut total = 0.0;
        for l in langs {
            total += self.direction_bleu(state, cfg, data, l)?;
        }
        Ok(total / langs.len() as f64)
    }

    /// BLEU for one source language into the pivot.
    fn direction_bleu(
        &self,
        state: &ModelState,
        cfg: &ModelConfig,
        data: &SeedData,
        source_lang: &LanguageId,
    ) -> Result<f64> {
        let test = data
            .test
            .get(source_lang)
            .ok_or_else(|| Error::Config(format!("no test set for {}", source_lang)))?;
        let sources: Vec<TokenSequence> = test.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<TokenSequence> = test.iter().map(|p| p.1.clone()).collect();
        let decoded = translate_corpus(state, cfg, &sources, &data.pivot, 0, &self.cfg().decode)?;
        let hyps: Vec<TokenSequence> = decoded.into_iter().map(|d| d.seq).collect();
        Ok(corpus_bleu_sequences(&hyps, &refs)?.bleu)
    }

    /// The standard two-stage model on the aux corpus at the main budget;
    /// also returns the stage-1 checkpoint path when an out_dir is given.
    fn transf_model(
        &self,
        art: &mut SeedArtifacts,
        data: &SeedData,
        seed: u64,
        out_dir: Option<std::path::PathBuf>,
    ) -> Result<(ModelState, Option<std::path::PathBuf>)> {
        if out_dir.is_none() {
            if let Some(state) = &art.transf {
                return Ok((state.clone(), None));
            }
        }
        let aux = self.aux_langs()?;
        let corpus = self.corpus_with_budget(data, &aux, self.cfg().experiment.pair_budget)?;
        let valid = self.valid_concat(data, &aux);
        let policy = SamplingPolicy::from_corpus(&corpus, self.cfg().train.alpha)?;
        let pre = self.pretrained(art, data, seed)?;
        let mut state = ModelState::init(&self.cfg().model, seed, Some(&pre.encoder_snapshot()))?;
        let mut opts = self.trainer_options();
        opts.out_dir = out_dir;
        let outcome = train_transf(
            &mut state,
            &self.cfg().model,
            &corpus,
            &valid,
            &policy,
            self.cfg().train.stage1_steps,
            self.cfg().train.stage2_steps,
            self.cfg().train.batch_tokens,
            self.cfg().train.pde,
            &opts,
            seed,
        )?;
        art.transf = Some(state.clone());
        let stage1_ckpt = outcome.stages[0].checkpoints.last().cloned();
        Ok((state, stage1_ckpt))
    }
}

/// Run every seed as an independent parallel task, collect rows in seed
/// order and merge artifacts back into the shared cache.
fn per_seed<F>(spec: &ExperimentSpec, cache: &mut ArtifactCache, body: F) -> Result<Vec<ReportRow>>
where
    F: Fn(u64, &mut SeedArtifacts) -> Result<SeedRows> + Sync,
{
    let prebuilt: Vec<(u64, SeedArtifacts)> = spec
        .seeds
        .iter()
        .map(|&seed| {
            (
                seed,
                SeedArtifacts {
                    mlm: cache.mlm.get(&seed).cloned(),
                    transf: cache.transf.get(&seed).cloned(),
                },
            )
        })
        .collect();
    let results: Vec<(u64, SeedArtifacts, SeedRows)> = prebuilt
        .into_par_iter()
        .map(|(seed, mut art)| {
            let rows = body(seed, &mut art)?;
            Ok((seed, art, rows))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (seed, art, seed_rows) in results {
        if let Some(mlm) = art.mlm {
            cache.mlm.insert(seed, mlm);
        }
        if let Some(transf) = art.transf {
            cache.transf.insert(seed, transf);
        }
        rows.extend(seed_rows.rows);
    }
    Ok(rows)
}

/// Fixed-budget comparison of one against several auxiliary languages,
/// scored by zero-shot BLEU on held-out languages.
pub fn run_multilinguality_ablation(
    spec: &ExperimentSpec,
    cache: &mut ArtifactCache,
) -> Result<ExperimentReport> {
    let h = Harness { spec };
    let aux = h.aux_langs()?;
    let heldout = h.heldout_langs()?;
    let budget = spec.config.experiment.pair_budget;
    let mut report = ExperimentReport {
        name: "multilinguality".into(),
        ..Default::default()
    };
    report.rows = per_seed(spec, cache, |seed, art| {
        let mut rows = SeedRows::default();
        let data = build_seed_data(&spec.config, seed)?;
        let pre = h.pretrained(art, &data, seed)?;
        let single = vec![aux[0].clone()];
        for (arm, langs) in [("aux1", &single), ("aux4", &aux)] {
            let corpus = h.corpus_with_budget(&data, langs, budget)?;
            let expected = budget / langs.len() * langs.len();
            if corpus.total_pairs() != expected {
                return Err(Error::Config("arm budgets diverged".into()));
            }
            rows.push(arm, seed, "train_pairs", corpus.total_pairs() as f64);
            let valid = h.valid_concat(&data, langs);
            let policy = SamplingPolicy::from_corpus(&corpus, spec.config.train.alpha)?;
            let mut state =
                ModelState::init(&spec.config.model, seed, Some(&pre.encoder_snapshot()))?;
            train_transf(
                &mut state,
                &spec.config.model,
                &corpus,
                &valid,
                &policy,
                spec.config.train.stage1_steps,
                spec.config.train.stage2_steps,
                spec.config.train.batch_tokens,
                spec.config.train.pde,
                &h.trainer_options(),
                seed,
            )?;
            for l in &heldout {
                let bleu = h.direction_bleu(&state, &spec.config.model, &data, l)?;
                rows.push(arm, seed, &format!("zeroshot_bleu_{}", l), bleu);
            }
            let mean = h.zero_shot_bleu(&state, &spec.config.model, &data, &heldout)?;
            rows.push(arm, seed, "zeroshot_bleu_mean", mean);
            if arm == "aux4" && langs.len() == aux.len() && budget == spec.config.experiment.pair_budget {
                // This arm is exactly the shared many-to-pivot model.
                art.transf = Some(state.clone());
            }
        }
        Ok(rows)
    })?;
    let m1 = report.aggregate("aux1", "zeroshot_bleu_mean");
    let m4 = report.aggregate("aux4", "zeroshot_bleu_mean");
    report.summary.push(("aux1_mean".into(), m1));
    report.summary.push(("aux4_mean".into(), m4));
    report.summary.push(("gain".into(), m4 - m1));
    report.notes.push(format!(
        "equal pair budget of {} per arm; zero-shot over {} held-out languages",
        budget,
        heldout.len()
    ));
    Ok(report)
}

/// PDE on/off at a small and a large corpus budget. Arms share seeds, data
/// and stage-1 trajectories; the report verifies the latter byte-exactly.
pub fn run_pde_ablation(spec: &ExperimentSpec, cache: &mut ArtifactCache) -> Result<ExperimentReport> {
    let h = Harness { spec };
    let aux = h.aux_langs()?;
    let heldout = h.heldout_langs()?;
    let mut report = ExperimentReport {
        name: "pde".into(),
        ..Default::default()
    };
    let settings = [
        ("small", spec.config.experiment.small_budget),
        ("large", spec.config.experiment.large_budget),
    ];
    report.rows = per_seed(spec, cache, |seed, art| {
        let mut rows = SeedRows::default();
        let data = build_seed_data(&spec.config, seed)?;
        let pre = h.pretrained(art, &data, seed)?;
        for (setting, budget) in settings {
            let corpus = h.corpus_with_budget(&data, &aux, budget)?;
            let valid = h.valid_concat(&data, &aux);
            let policy = SamplingPolicy::from_corpus(&corpus, spec.config.train.alpha)?;
            let mut stage1_payloads = Vec::new();
            for (arm, pde) in [("pde", true), ("nopde", false)] {
                let dir = tempfile::tempdir().map_err(Error::Io)?;
                let mut opts = h.trainer_options();
                opts.out_dir = Some(dir.path().to_path_buf());
                let mut state =
                    ModelState::init(&spec.config.model, seed, Some(&pre.encoder_snapshot()))?;
                let outcome = train_transf(
                    &mut state,
                    &spec.config.model,
                    &corpus,
                    &valid,
                    &policy,
                    spec.config.train.stage1_steps,
                    spec.config.train.stage2_steps,
                    spec.config.train.batch_tokens,
                    pde,
                    &opts,
                    seed,
                )?;
                let stage1_ckpt = outcome.stages[0]
                    .checkpoints
                    .last()
                    .ok_or_else(|| Error::Config("no stage-1 checkpoint".into()))?;
                stage1_payloads.push(std::fs::read(stage1_ckpt)?);
                let mean = h.zero_shot_bleu(&state, &spec.config.model, &data, &heldout)?;
                rows.push(&format!("{}_{}", setting, arm), seed, "zeroshot_bleu_mean", mean);
            }
            let identical = stage1_payloads[0] == stage1_payloads[1];
            rows.push(
                &format!("{}_stage1_identical", setting),
                seed,
                "bool",
                if identical { 1.0 } else { 0.0 },
            );
            if !identical {
                return Err(Error::Config(
                    "stage-1 trajectories diverged between PDE arms".into(),
                ));
            }
        }
        Ok(rows)
    })?;
    let small_gap = report.aggregate("small_pde", "zeroshot_bleu_mean")
        - report.aggregate("small_nopde", "zeroshot_bleu_mean");
    let large_gap = report.aggregate("large_pde", "zeroshot_bleu_mean")
        - report.aggregate("large_nopde", "zeroshot_bleu_mean");
    for (key, arm) in [
        ("small_pde_mean", "small_pde"),
        ("small_nopde_mean", "small_nopde"),
        ("large_pde_mean", "large_pde"),
        ("large_nopde_mean", "large_nopde"),
    ] {
        report
            .summary
            .push((key.into(), report.aggregate(arm, "zeroshot_bleu_mean")));
    }
    report.summary.push(("small_gap".into(), small_gap));
    report.summary.push(("large_gap".into(), large_gap));
    report
        .notes
        .push("arms share seeds and stage-1 trajectories (verified byte-exactly)".into());
    Ok(report)
}

/// Two-stage recipe against the all-parameters baseline and the stage-1-only
/// model, under equal step budgets, plus the encoder retrieval probe.
pub fn run_transf_vs_ftall(spec: &ExperimentSpec, cache: &mut ArtifactCache) -> Result<ExperimentReport> {
    let h = Harness { spec };
    let aux = h.aux_langs()?;
    let heldout = h.heldout_langs()?;
    let total_steps = spec.config.train.stage1_steps + spec.config.train.stage2_steps;
    let mut report = ExperimentReport {
        name: "transf_vs_ftall".into(),
        ..Default::default()
    };
    report.rows = per_seed(spec, cache, |seed, art| {
        let mut rows = SeedRows::default();
        let data = build_seed_data(&spec.config, seed)?;
        let pre = h.pretrained(art, &data, seed)?;
        let corpus = h.corpus_with_budget(&data, &aux, spec.config.experiment.pair_budget)?;
        let valid = h.valid_concat(&data, &aux);
        let policy = SamplingPolicy::from_corpus(&corpus, spec.config.train.alpha)?;

        // TransF, with its stage-1 endpoint taken from the checkpoint series.
        let dir = tempfile::tempdir().map_err(Error::Io)?;
        art.transf = None;
        let (transf, stage1_ckpt) =
            h.transf_model(art, &data, seed, Some(dir.path().to_path_buf()))?;
        let stage1_ckpt = stage1_ckpt.ok_or_else(|| Error::Config("no stage-1 checkpoint".into()))?;
        let stage1_only =
            crate::trainer::state_from_checkpoint(&crate::trainer::load_checkpoint(&stage1_ckpt)?)?;

        // ft-all with the same total step budget and initialization.
        let mut ftall = ModelState::init(&spec.config.model, seed, Some(&pre.encoder_snapshot()))?;
        train_ft_all(
            &mut ftall,
            &spec.config.model,
            &corpus,
            &valid,
            &policy,
            total_steps,
            spec.config.train.batch_tokens,
            &h.trainer_options(),
            seed,
        )?;

        for (arm, state) in [
            ("transf", &transf),
            ("ftall", &ftall),
            ("stage1only", &stage1_only),
        ] {
            let zs = h.zero_shot_bleu(state, &spec.config.model, &data, &heldout)?;
            rows.push(arm, seed, "zeroshot_bleu_mean", zs);
            let supervised = h.direction_bleu(state, &spec.config.model, &data, &aux[0])?;
            rows.push(arm, seed, "supervised_bleu", supervised);
        }

        // Retrieval probe on the first held-out language: the fine-tuned
        // encoder against the pretrain-only encoder on the same pool.
        let probe_lang = &heldout[0];
        let pool: Vec<(TokenSequence, TokenSequence)> = {
            let test = data.test.get(probe_lang).unwrap();
            let needed = spec.config.experiment.probe_pairs;
            let mut pool = test.clone();
            if pool.len() < needed {
                let extra = data.train_pools.get(probe_lang).map(|p| p.as_slice()).unwrap_or(&[]);
                pool.extend(extra.iter().take(needed - pool.len()).cloned());
            }
            pool.truncate(needed);
            pool
        };
        let transf_acc = retrieval_accuracy(&transf, &spec.config.model, &pool)?.accuracy;
        let pre_acc = retrieval_accuracy(&pre, &spec.config.model, &pool)?.accuracy;
        rows.push("transf", seed, "retrieval_accuracy", transf_acc);
        rows.push("pretrain_only", seed, "retrieval_accuracy", pre_acc);
        Ok(rows)
    })?;
    for arm in ["transf", "ftall", "stage1only"] {
        report.summary.push((
            format!("{}_zeroshot_mean", arm),
            report.aggregate(arm, "zeroshot_bleu_mean"),
        ));
        report.summary.push((
            format!("{}_supervised_mean", arm),
            report.aggregate(arm, "supervised_bleu"),
        ));
    }
    report.summary.push((
        "transf_retrieval_mean".into(),
        report.aggregate("transf", "retrieval_accuracy"),
    ));
    report.summary.push((
        "pretrain_retrieval_mean".into(),
        report.aggregate("pretrain_only", "retrieval_accuracy"),
    ));
    report
        .notes
        .push(format!("equal step budget of {} for every arm", total_steps));
    Ok(report)
}

/// One round of back-translation for a monolingual-only language: the
/// many-to-pivot model writes the synthetic corpus, then reverse models with
/// pretrained and random initialization train on identical pairs.
pub fn run_backtranslation_experiment(
    spec: &ExperimentSpec,
    cache: &mut ArtifactCache,
) -> Result<ExperimentReport> {
    let h = Harness { spec };
    let bt_lang = lang_id(&spec.config.experiment.bt_lang)?;
    let mut report = ExperimentReport {
        name: "backtranslation".into(),
        ..Default::default()
    };
    report.rows = per_seed(spec, cache, |seed, art| {
        let mut rows = SeedRows::default();
        let data = build_seed_data(&spec.config, seed)?;
        if data.bt_train_mono.is_empty() {
            return Err(Error::Config(format!(
                "back-translation language {} is not in data.languages",
                spec.config.experiment.bt_lang
            )));
        }
        let (forward_state, _) = h.transf_model(art, &data, seed, None)?;
        let forward = ModelTranslator {
            state: &forward_state,
            cfg: &spec.config.model,
            target_lang: data.pivot.clone(),
            target_lang_index: 0,
            decode: spec.config.decode.clone(),
        };
        // One round: every monolingual sentence translated once.
        let synthetic = build_backtranslation_corpus(&forward, &data.bt_train_mono)?;
        rows.push("common", seed, "synthetic_pairs", synthetic.len() as f64);
        let n_valid = (synthetic.len() / 10).max(1);
        let (train_pairs, valid_pairs) = synthetic.split_at(synthetic.len() - n_valid);
        let mut map = BTreeMap::new();
        map.insert(data.pivot.clone(), train_pairs.to_vec());
        let corpus = MultilingualCorpus::new(map, bt_lang.clone())?;
        let policy = SamplingPolicy::from_corpus(&corpus, spec.config.train.alpha)?;

        // Reverse test set: pivot -> bt_lang (swap the derived direction).
        let reverse_test: Vec<(TokenSequence, TokenSequence)> = data
            .test
            .get(&bt_lang)
            .ok_or_else(|| Error::Config(format!("no test set for {}", bt_lang)))?
            .iter()
            .map(|(src, tgt)| (tgt.clone(), src.clone()))
            .collect();
        let test_bleu = |state: &ModelState| -> Result<f64> {
            let sources: Vec<TokenSequence> = reverse_test.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<TokenSequence> = reverse_test.iter().map(|p| p.1.clone()).collect();
            let decoded =
                translate_corpus(state, &spec.config.model, &sources, &bt_lang, 0, &spec.config.decode)?;
            let hyps: Vec<TokenSequence> = decoded.into_iter().map(|d| d.seq).collect();
            Ok(corpus_bleu_sequences(&hyps, &refs)?.bleu)
        };

        let pre = h.pretrained(art, &data, seed)?;
        for (arm, pretrained) in [("random_init", None), ("pretrained_init", Some(&pre))] {
            let dir = tempfile::tempdir().map_err(Error::Io)?;
            let mut opts = h.trainer_options();
            opts.out_dir = Some(dir.path().to_path_buf());
            let snapshot = pretrained.map(|p| p.encoder_snapshot());
            let mut state = ModelState::init(&spec.config.model, seed ^ 0xb7, snapshot.as_ref())?;
            let outcome = train_reverse(
                &mut state,
                &spec.config.model,
                &corpus,
                valid_pairs,
                &policy,
                spec.config.experiment.bt_stage1_steps,
                spec.config.experiment.bt_stage2_steps,
                spec.config.train.batch_tokens,
                &opts,
                seed,
            )?;
            // Candidate series for round-trip selection: stage-2 checkpoints.
            let candidates: Vec<std::path::PathBuf> = outcome.stages[1].checkpoints.clone();
            let (chosen_path, selection) = crate::trainer::select_checkpoint_by_round_trip(
                &candidates,
                &forward,
                &data.bt_round_trip_mono,
                &bt_lang,
                &spec.config.decode,
            )?;
            let chosen = crate::trainer::state_from_checkpoint(&crate::trainer::load_checkpoint(
                &chosen_path,
            )?)?;
            rows.push(arm, seed, "test_bleu_selected", test_bleu(&chosen)?);
            rows.push(arm, seed, "test_bleu_final", test_bleu(&state)?);
            rows.push(arm, seed, "round_trip_bleu", selection.bleu);
            rows.push(arm, seed, "selected_step", selection.step as f64);
        }
        Ok(rows)
    })?;
    report.summary.push((
        "pretrained_mean".into(),
        report.aggregate("pretrained_init", "test_bleu_selected"),
    ));
    report.summary.push((
        "random_mean".into(),
        report.aggregate("random_init", "test_bleu_selected"),
    ));
    report.notes.push(
        "both arms train on identical synthetic pairs from one back-translation round".into(),
    );
    Ok(report)
}

/// Dispatch on the experiment named in the spec.
pub fn run_experiment(spec: &ExperimentSpec, cache: &mut ArtifactCache) -> Result<ExperimentReport> {
    match spec.kind {
        ExperimentKind::Multilinguality => run_multilinguality_ablation(spec, cache),
        ExperimentKind::Pde => run_pde_ablation(spec, cache),
        ExperimentKind::TransfVsFtall => run_transf_vs_ftall(spec, cache),
        ExperimentKind::Backtranslation => run_backtranslation_experiment(spec, cache),
    }
}
