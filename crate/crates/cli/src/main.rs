//! One binary exposing the whole pipeline: corpus generation, pretraining,
//! two-stage training, translation, scoring, back-translation, the retrieval
//! probe and the ablation experiments.
//!
//! Logs go to standard error; data goes to files and standard output. All
//! randomness flows from `--seed`. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use zsmt_core::config::{defaults_listing, ExperimentSettings, RunConfig};
use zsmt_core::data::{
    derive_language, read_mono, read_parallel, write_mono, write_parallel, Grammar, LanguageId,
    MultilingualCorpus, SamplingPolicy, TokenSequence,
};
use zsmt_core::decode::{translate_corpus, ModelTranslator};
use zsmt_core::eval::{corpus_bleu, retrieval_accuracy};
use zsmt_core::experiments::{run_experiment, ArtifactCache, ExperimentSpec};
use zsmt_core::model::ModelState;
use zsmt_core::trainer::{
    build_backtranslation_corpus, encoder_checkpoint, load_checkpoint, pretrain_mlm,
    save_checkpoint, snapshot, state_from_checkpoint, train_ft_all, train_transf, MlmConfig,
    TrainerOptions,
};

#[derive(Parser)]
#[command(name = "zsmt", about = "Desk-scale multilingual seq2seq training lab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file(s); later files override earlier ones.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual corpus files.
    GenCorpus {
        /// Output directory for corpus files.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Masked-LM pretraining of the encoder on monolingual files.
    Pretrain {
        /// Directory holding `mono.<lang>` files.
        #[arg(long)]
        data_dir: PathBuf,
        /// Encoder checkpoint to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage fine-tuning (or the all-parameters baseline).
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        /// Pretrained encoder checkpoint to initialise from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out_dir: PathBuf,
        /// Source languages to train on (defaults to experiment.aux_langs).
        #[arg(long)]
        langs: Option<String>,
        /// Which stages to run.
        #[arg(long, default_value = "all", value_parser = ["1", "2", "all"])]
        stage: String,
        /// Positional-disentangled encoder at stage 2.
        #[arg(long, value_parser = ["on", "off"])]
        pde: Option<String>,
        /// Train every parameter in one stage instead of the two-stage recipe.
        #[arg(long, default_value_t = false)]
        ft_all: bool,
    },
    /// Translate a corpus file with beam search.
    Translate {
        #[arg(long)]
        model: PathBuf,
        /// Source file (one framed id sentence per line).
        #[arg(long)]
        src: PathBuf,
        /// Output file; one decoded line per input line.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// Tag for the produced sentences.
        #[arg(long, default_value = "pv")]
        target_lang: String,
        /// Target-language projection index (many-to-many models).
        #[arg(long, default_value_t = 0)]
        target_lang_index: usize,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// One round of back-translation: synthesize a parallel corpus from
    /// monolingual text.
    Backtranslate {
        /// Forward (many-to-pivot) model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Monolingual file of the low-resource language.
        #[arg(long)]
        mono: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// Language tag of the monolingual file.
        #[arg(long)]
        lang: String,
    },
    /// Cross-lingual sentence retrieval probe over encoder representations.
    Probe {
        #[arg(long)]
        model: PathBuf,
        /// Aligned source/pivot files.
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Run a named ablation experiment from a spec file.
    Experiment {
        /// Spec file (flat `key = value`); applied after --config files.
        #[arg(long)]
        spec: PathBuf,
        /// Report file; the report is also printed to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print every configuration key with its default and owning module.
    Defaults,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for path in &common.config {
        cfg.apply_file(path)
            .with_context(|| format!("loading {}", path.display()))?;
    }
    Ok(cfg)
}

fn lang_id(tag: &str) -> Result<LanguageId> {
    Ok(LanguageId::new(tag)?)
}

/// Derived-language roles used by gen-corpus and train.
struct CorpusLayout {
    grammar: Grammar,
    pivot: LanguageId,
    langs: Vec<(LanguageId, usize)>,
}

impl CorpusLayout {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let grammar = Grammar::new(cfg.data.grammar_config())?;
        let pivot = lang_id(&cfg.data.pivot)?;
        let langs = cfg
            .data
            .language_list()?
            .into_iter()
            .map(|(tag, w)| Ok((lang_id(&tag)?, w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CorpusLayout { grammar, pivot, langs })
    }
}

fn cmd_gen_corpus(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let layout = CorpusLayout::new(cfg)?;
    let d = &cfg.data;
    let per_lang = d.train_pairs_per_lang + d.valid_pairs_per_lang + d.test_pairs_per_lang + d.mono_per_lang;
    let total = per_lang * layout.langs.len() + d.mono_per_lang;
    let stream = layout
        .grammar
        .generate_pivot(seed, total, &layout.pivot, d.max_source_length)?;
    let mut cursor = 0usize;
    let mut take = |n: usize| {
        let s = stream[cursor..cursor + n].to_vec();
        cursor += n;
        s
    };
    for (block, (id, window)) in layout.langs.iter().enumerate() {
        let spec = layout
            .grammar
            .language_spec(id.clone(), block + 1, *window, seed ^ 0xa5a5)?;
        for (split, n) in [
            ("train", d.train_pairs_per_lang),
            ("valid", d.valid_pairs_per_lang),
            ("test", d.test_pairs_per_lang),
        ] {
            let pairs = derive_language(&take(n), &spec)?;
            let name = format!("{}_{}-{}", split, id, layout.pivot);
            write_parallel(out_dir, &name, id, &layout.pivot, &pairs)?;
        }
        let mono: Vec<TokenSequence> = derive_language(&take(d.mono_per_lang), &spec)?
            .into_iter()
            .map(|p| p.0)
            .collect();
        write_mono(&out_dir.join(format!("mono.{}", id)), &mono)?;
        eprintln!("generated corpus for {}", id);
    }
    let pivot_mono = take(d.mono_per_lang);
    write_mono(&out_dir.join(format!("mono.{}", layout.pivot)), &pivot_mono)?;
    eprintln!("corpus written to {}", out_dir.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, seed: u64, data_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let layout = CorpusLayout::new(cfg)?;
    let mut mono = BTreeMap::new();
    let mut tags: Vec<LanguageId> = layout.langs.iter().map(|(l, _)| l.clone()).collect();
    tags.push(layout.pivot.clone());
    for id in tags {
        let path = data_dir.join(format!("mono.{}", id));
        let sentences = read_mono(&path, &id, cfg.data.max_source_length, cfg.data.vocab_size)
            .with_context(|| format!("reading {}", path.display()))?;
        mono.insert(id, sentences);
    }
    let mlm = MlmConfig {
        steps: cfg.train.mlm_steps,
        batch_tokens: cfg.train.mlm_batch_tokens,
        mask_ratio: cfg.train.mlm_mask_ratio,
        lr: cfg.train.mlm_lr,
        warmup: cfg.train.mlm_warmup,
        alpha: cfg.train.alpha,
        content_range: layout.grammar.content_range(),
    };
    let outcome = pretrain_mlm(&cfg.model, &mono, &mlm, &cfg.optimizer, seed)?;
    eprint!("{}", outcome.log);
    let ckpt = encoder_checkpoint(&outcome.state, &cfg.model, cfg.train.mlm_steps as u64, seed);
    save_checkpoint(&ckpt, out)?;
    eprintln!("encoder checkpoint written to {}", out.display());
    Ok(())
}

fn read_parallel_set(
    cfg: &RunConfig,
    data_dir: &Path,
    split: &str,
    langs: &[LanguageId],
    pivot: &LanguageId,
) -> Result<BTreeMap<LanguageId, Vec<(TokenSequence, TokenSequence)>>> {
    let mut out = BTreeMap::new();
    for id in langs {
        let name = format!("{}_{}-{}", split, id, pivot);
        let pairs = read_parallel(
            data_dir,
            &name,
            id,
            pivot,
            cfg.data.max_source_length,
            cfg.data.vocab_size,
        )
        .with_context(|| format!("reading {} pairs for {}", split, id))?;
        out.insert(id.clone(), pairs);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &RunConfig,
    seed: u64,
    data_dir: &Path,
    init: Option<&Path>,
    out_dir: &Path,
    langs: Option<&str>,
    stage: &str,
    pde: Option<&str>,
    ft_all: bool,
) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let layout = CorpusLayout::new(cfg)?;
    let lang_tags = match langs {
        Some(list) => ExperimentSettings::lang_list(list),
        None => ExperimentSettings::lang_list(&cfg.experiment.aux_langs),
    };
    let langs: Vec<LanguageId> = lang_tags.iter().map(|t| lang_id(t)).collect::<Result<_>>()?;
    let train_map = read_parallel_set(cfg, data_dir, "train", &langs, &layout.pivot)?;
    let valid_map = read_parallel_set(cfg, data_dir, "valid", &langs, &layout.pivot)?;
    let train = MultilingualCorpus::new(train_map, layout.pivot.clone())?;
    let valid: Vec<(TokenSequence, TokenSequence)> =
        valid_map.into_values().flatten().collect();
    let policy = SamplingPolicy::from_corpus(&train, cfg.train.alpha)?;
    let pretrained = match init {
        Some(path) => Some(load_checkpoint(path)?.params),
        None => None,
    };
    let mut state = ModelState::init(&cfg.model, seed, pretrained.as_ref())?;
    let opts = TrainerOptions {
        optimizer: cfg.optimizer.clone(),
        label_smoothing: cfg.train.label_smoothing,
        checkpoint_interval: cfg.train.checkpoint_interval,
        valid_interval: cfg.train.valid_interval,
        out_dir: Some(out_dir.to_path_buf()),
    };
    let use_pde = match pde {
        Some("on") => true,
        Some("off") => false,
        _ => cfg.train.pde,
    };
    let outcome = if ft_all {
        let steps = cfg.train.stage1_steps + cfg.train.stage2_steps;
        train_ft_all(
            &mut state, &cfg.model, &train, &valid, &policy, steps,
            cfg.train.batch_tokens, &opts, seed,
        )?
    } else {
        let (s1, s2) = match stage {
            "1" => (cfg.train.stage1_steps, 0),
            "2" => (0, cfg.train.stage2_steps),
            _ => (cfg.train.stage1_steps, cfg.train.stage2_steps),
        };
        match (s1, s2) {
            (s1, 0) if s1 > 0 => {
                use zsmt_core::model::TrainingStage;
                use zsmt_core::trainer::{train_stages, TrainStageConfig};
                train_stages(
                    &mut state, &cfg.model, &train, &valid, &policy,
                    &[TrainStageConfig {
                        stage: TrainingStage::Stage1,
                        steps: s1,
                        batch_tokens: cfg.train.batch_tokens,
                        pde_enabled_this_stage: false,
                    }],
                    &opts, seed, 0,
                )?
            }
            (0, s2) if s2 > 0 => {
                use zsmt_core::model::TrainingStage;
                use zsmt_core::trainer::{train_stages, TrainStageConfig};
                train_stages(
                    &mut state, &cfg.model, &train, &valid, &policy,
                    &[TrainStageConfig {
                        stage: TrainingStage::Stage2,
                        steps: s2,
                        batch_tokens: cfg.train.batch_tokens,
                        pde_enabled_this_stage: use_pde,
                    }],
                    &opts, seed, 0,
                )?
            }
            _ => train_transf(
                &mut state, &cfg.model, &train, &valid, &policy,
                cfg.train.stage1_steps, cfg.train.stage2_steps,
                cfg.train.batch_tokens, use_pde, &opts, seed,
            )?,
        }
    };
    for stage in &outcome.stages {
        eprintln!(
            "{}: train_loss {:.4} valid_loss {:?} clip_activations {}",
            stage.stage.label(),
            stage.final_train_loss,
            stage.final_valid_loss,
            stage.clip_activations
        );
    }
    let final_ckpt = snapshot(&state, &cfg.model, 0, seed);
    save_checkpoint(&final_ckpt, &out_dir.join("final.sxtp"))?;
    eprintln!("final checkpoint written to {}", out_dir.join("final.sxtp").display());
    Ok(())
}

fn cmd_translate(
    cfg: &RunConfig,
    model: &Path,
    src: &Path,
    out: &Path,
    beam: Option<usize>,
    target_lang: &str,
    target_lang_index: usize,
) -> Result<()> {
    let ckpt = load_checkpoint(model)?;
    let state = state_from_checkpoint(&ckpt)?;
    // The tag of the input file is irrelevant for decoding; only ids matter.
    let src_lang = lang_id("src")?;
    let sentences = read_mono(src, &src_lang, ckpt.config.max_positions, ckpt.config.vocab_size)?;
    let mut dcfg = cfg.decode.clone();
    if let Some(b) = beam {
        dcfg.beam_size = b;
    }
    let target = lang_id(target_lang)?;
    let decoded = translate_corpus(&state, &ckpt.config, &sentences, &target, target_lang_index, &dcfg)?;
    let flagged = decoded.iter().filter(|d| d.flagged).count();
    if flagged > 0 {
        eprintln!("{} sentences hit the length limit without EOS", flagged);
    }
    let seqs: Vec<TokenSequence> = decoded.into_iter().map(|d| d.seq).collect();
    write_mono(out, &seqs)?;
    eprintln!("wrote {} translations to {}", seqs.len(), out.display());
    Ok(())
}

fn read_id_lines(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let ids = line
            .split_ascii_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| anyhow::anyhow!("{}:{}: bad token {:?}", path.display(), lineno + 1, t))
            })
            .collect::<Result<Vec<u32>>>()?;
        out.push(ids);
    }
    Ok(out)
}

/// Strip BOS/EOS framing and trailing pads if present, for scoring.
fn strip_frame(ids: &[u32]) -> Vec<u32> {
    use zsmt_core::data::{BOS, EOS, PAD};
    let mut s: &[u32] = ids;
    while let Some((&last, rest)) = s.split_last() {
        if last == PAD {
            s = rest;
        } else {
            break;
        }
    }
    if let Some((&first, rest)) = s.split_first() {
        if first == BOS {
            s = rest;
        }
    }
    if let Some((&last, rest)) = s.split_last() {
        if last == EOS {
            s = rest;
        }
    }
    s.to_vec()
}

fn cmd_score(hyp: &Path, reference: &Path) -> Result<()> {
    let hyps: Vec<Vec<u32>> = read_id_lines(hyp)?.iter().map(|v| strip_frame(v)).collect();
    let refs: Vec<Vec<u32>> = read_id_lines(reference)?.iter().map(|v| strip_frame(v)).collect();
    let report = corpus_bleu(&hyps, &refs)?;
    print!("{}", report.metric_lines());
    eprintln!("{}", report.summary());
    Ok(())
}

fn cmd_backtranslate(
    cfg: &RunConfig,
    model: &Path,
    mono: &Path,
    out_dir: &Path,
    beam: Option<usize>,
    lang: &str,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let ckpt = load_checkpoint(model)?;
    let state = state_from_checkpoint(&ckpt)?;
    let source_lang = lang_id(lang)?;
    let pivot = lang_id(&cfg.data.pivot)?;
    let sentences = read_mono(mono, &source_lang, ckpt.config.max_positions, ckpt.config.vocab_size)?;
    let mut dcfg = cfg.decode.clone();
    if let Some(b) = beam {
        dcfg.beam_size = b;
    }
    let translator = ModelTranslator {
        state: &state,
        cfg: &ckpt.config,
        target_lang: pivot.clone(),
        target_lang_index: 0,
        decode: dcfg,
    };
    let pairs = build_backtranslation_corpus(&translator, &sentences)?;
    let name = format!("bt_{}-{}", pivot, source_lang);
    let (src_path, tgt_path) = write_parallel(out_dir, &name, &pivot, &source_lang, &pairs)?;
    eprintln!(
        "wrote {} synthetic pairs to {} / {}",
        pairs.len(),
        src_path.display(),
        tgt_path.display()
    );
    Ok(())
}

fn cmd_probe(cfg: &RunConfig, model: &Path, src: &Path, reference: &Path) -> Result<()> {
    let ckpt = load_checkpoint(model)?;
    let state = state_from_checkpoint(&ckpt)?;
    let src_lang = lang_id("probe")?;
    let pivot = lang_id(&cfg.data.pivot)?;
    let sources = read_mono(src, &src_lang, ckpt.config.max_positions, ckpt.config.vocab_size)?;
    let refs = read_mono(reference, &pivot, ckpt.config.max_positions, ckpt.config.vocab_size)?;
    if sources.len() != refs.len() {
        bail!("probe files are not aligned: {} vs {}", sources.len(), refs.len());
    }
    let pairs: Vec<(TokenSequence, TokenSequence)> = sources.into_iter().zip(refs).collect();
    let report = retrieval_accuracy(&state, &ckpt.config, &pairs)?;
    print!("{}", report.metric_lines());
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig, spec_path: &Path, out: Option<&Path>) -> Result<()> {
    let mut config = cfg.clone();
    config.apply_file(spec_path)?;
    let spec = ExperimentSpec::from_config(config)?;
    let mut cache = ArtifactCache::new();
    let report = run_experiment(&spec, &mut cache)?;
    let rendered = report.render();
    if let Some(path) = out {
        std::fs::write(path, &rendered)?;
    }
    print!("{}", rendered);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let seed = cli.common.seed;
    match &cli.command {
        Command::GenCorpus { out_dir } => cmd_gen_corpus(&cfg, seed, out_dir),
        Command::Pretrain { data_dir, out } => cmd_pretrain(&cfg, seed, data_dir, out),
        Command::Train {
            data_dir,
            init,
            out_dir,
            langs,
            stage,
            pde,
            ft_all,
        } => cmd_train(
            &cfg,
            seed,
            data_dir,
            init.as_deref(),
            out_dir,
            langs.as_deref(),
            stage,
            pde.as_deref(),
            *ft_all,
        ),
        Command::Translate {
            model,
            src,
            out,
            beam,
            target_lang,
            target_lang_index,
        } => cmd_translate(&cfg, model, src, out, *beam, target_lang, *target_lang_index),
        Command::Score { hyp, reference } => cmd_score(hyp, reference),
        Command::Backtranslate {
            model,
            mono,
            out_dir,
            beam,
            lang,
        } => cmd_backtranslate(&cfg, model, mono, out_dir, *beam, lang),
        Command::Probe { model, src, reference } => cmd_probe(&cfg, model, src, reference),
        Command::Experiment { spec, out } => cmd_experiment(&cfg, spec, out.as_deref()),
        Command::Defaults => {
            print!("{}", defaults_listing());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success, not usage errors.
            if e.use_stderr() {
                eprint!("{}", e);
                return ExitCode::from(1);
            }
            print!("{}", e);
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(2)
        }
    }
}
