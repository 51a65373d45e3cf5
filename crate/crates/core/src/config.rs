//! Flat `key = value` run configuration.
//!
//! Keys are grouped by dotted prefix (data / model / train / decode /
//! experiment). Files are UTF-8 text, one pair per line, `#` starts a
//! comment. Unknown keys are rejected by name. Later files override earlier
//! ones.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::GrammarConfig;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::OptimizerConfig;

/// Data-generation settings (grammar plus corpus sizes and language roles).
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub vocab_size: usize,
    pub max_source_length: usize,
    pub anchor_count: usize,
    pub tokens_per_class: usize,
    pub anchor_prob: f64,
    pub affinity: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub pivot: String,
    /// Derived languages as `tag:window` entries; block order follows the list.
    pub languages: String,
    pub mono_per_lang: usize,
    pub train_pairs_per_lang: usize,
    pub valid_pairs_per_lang: usize,
    pub test_pairs_per_lang: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            vocab_size: 416,
            max_source_length: 64,
            anchor_count: 8,
            tokens_per_class: 16,
            anchor_prob: 0.5,
            affinity: 0.8,
            min_len: 4,
            max_len: 10,
            pivot: "pv".into(),
            languages: "l1:1,l2:1,l3:2,l4:2,z1:2,z2:3,l5:2".into(),
            mono_per_lang: 2000,
            train_pairs_per_lang: 8000,
            valid_pairs_per_lang: 100,
            test_pairs_per_lang: 150,
        }
    }
}

impl DataSettings {
    pub fn grammar_config(&self) -> GrammarConfig {
        GrammarConfig {
            vocab_size: self.vocab_size,
            anchor_count: self.anchor_count,
            tokens_per_class: self.tokens_per_class,
            anchor_prob: self.anchor_prob,
            affinity: self.affinity,
            min_len: self.min_len,
            max_len: self.max_len,
        }
    }

    /// Parse the `tag:window` language list.
    pub fn language_list(&self) -> Result<Vec<(String, usize)>> {
        let mut out = Vec::new();
        for item in self.languages.split(',') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (tag, window) = item.split_once(':').ok_or_else(|| {
                Error::Config(format!("language entry {:?} is not tag:window", item))
            })?;
            let window: usize = window
                .parse()
                .map_err(|_| Error::Config(format!("bad reorder window in {:?}", item)))?;
            out.push((tag.to_string(), window));
        }
        if out.is_empty() {
            return Err(Error::Config("empty language list".into()));
        }
        Ok(out)
    }
}

/// Training-run settings beyond the optimizer itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub alpha: f64,
    pub pde: bool,
    pub checkpoint_interval: usize,
    pub valid_interval: usize,
    pub mlm_steps: usize,
    pub mlm_batch_tokens: usize,
    pub mlm_mask_ratio: f64,
    pub mlm_lr: f64,
    pub mlm_warmup: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            stage1_steps: 1200,
            stage2_steps: 600,
            batch_tokens: 256,
            label_smoothing: 0.0,
            alpha: 0.2,
            pde: true,
            checkpoint_interval: 0,
            valid_interval: 0,
            mlm_steps: 2000,
            mlm_batch_tokens: 256,
            mlm_mask_ratio: 0.15,
            mlm_lr: 2e-3,
            mlm_warmup: 100,
        }
    }
}

/// Experiment harness settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub name: String,
    /// Comma-separated seed list; at least three.
    pub seeds: String,
    pub aux_langs: String,
    pub heldout_langs: String,
    pub bt_lang: String,
    pub pair_budget: usize,
    pub small_budget: usize,
    pub large_budget: usize,
    pub probe_pairs: usize,
    pub bt_mono: usize,
    pub bt_stage1_steps: usize,
    pub bt_stage2_steps: usize,
    pub round_trip_sentences: usize,
    pub out_dir: String,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            name: "multilinguality".into(),
            seeds: "1,2,3".into(),
            aux_langs: "l1,l2,l3,l4".into(),
            heldout_langs: "z1,z2".into(),
            bt_lang: "l5".into(),
            pair_budget: 8_000,
            small_budget: 2_000,
            large_budget: 8_000,
            probe_pairs: 500,
            bt_mono: 1_200,
            bt_stage1_steps: 500,
            bt_stage2_steps: 300,
            round_trip_sentences: 100,
            out_dir: String::new(),
        }
    }
}

impl ExperimentSettings {
    pub fn seed_list(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = self
            .seeds
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {:?}", s)))
            })
            .collect::<Result<_>>()?;
        if seeds.len() < 3 {
            return Err(Error::Config(format!(
                "experiments need at least 3 seeds, got {}",
                seeds.len()
            )));
        }
        Ok(seeds)
    }

    pub fn lang_list(field: &str) -> Vec<String> {
        field
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub data: DataSettings,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub optimizer: OptimizerConfig,
    pub decode: DecodeConfig,
    pub experiment: ExperimentSettings,
}

macro_rules! keys {
    ($($key:literal => $owner:literal, $get:expr, $set:expr;)*) => {
        /// Every key with its owning module and accessors.
        fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => { let f: fn(&mut RunConfig, &str) -> Result<()> = $set; f(cfg, value) })*
                _ => Err(Error::Config(format!("unknown configuration key {:?}", key))),
            }
        }

        /// `key = default  # owner` lines for the `defaults` listing.
        pub fn defaults_listing() -> String {
            let cfg = RunConfig::default();
            let mut out = String::new();
            $(
                let g: fn(&RunConfig) -> String = $get;
                let _ = writeln!(out, "{} = {}  # {}", $key, g(&cfg), $owner);
            )*
            out
        }
    };
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {:?} for key {}", value, key)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {:?} for key {}", value, key))),
    }
}

keys! {
    "data.vocab_size" => "data", |c| c.data.vocab_size.to_string(), |c, v| { c.data.vocab_size = parse("data.vocab_size", v)?; Ok(()) };
    "data.max_source_length" => "data", |c| c.data.max_source_length.to_string(), |c, v| { c.data.max_source_length = parse("data.max_source_length", v)?; Ok(()) };
    "data.anchor_count" => "data", |c| c.data.anchor_count.to_string(), |c, v| { c.data.anchor_count = parse("data.anchor_count", v)?; Ok(()) };
    "data.tokens_per_class" => "data", |c| c.data.tokens_per_class.to_string(), |c, v| { c.data.tokens_per_class = parse("data.tokens_per_class", v)?; Ok(()) };
    "data.anchor_prob" => "data", |c| c.data.anchor_prob.to_string(), |c, v| { c.data.anchor_prob = parse("data.anchor_prob", v)?; Ok(()) };
    "data.affinity" => "data", |c| c.data.affinity.to_string(), |c, v| { c.data.affinity = parse("data.affinity", v)?; Ok(()) };
    "data.min_len" => "data", |c| c.data.min_len.to_string(), |c, v| { c.data.min_len = parse("data.min_len", v)?; Ok(()) };
    "data.max_len" => "data", |c| c.data.max_len.to_string(), |c, v| { c.data.max_len = parse("data.max_len", v)?; Ok(()) };
    "data.pivot" => "data", |c| c.data.pivot.clone(), |c, v| { c.data.pivot = v.to_string(); Ok(()) };
    "data.languages" => "data", |c| c.data.languages.clone(), |c, v| { c.data.languages = v.to_string(); Ok(()) };
    "data.mono_per_lang" => "data", |c| c.data.mono_per_lang.to_string(), |c, v| { c.data.mono_per_lang = parse("data.mono_per_lang", v)?; Ok(()) };
    "data.train_pairs_per_lang" => "data", |c| c.data.train_pairs_per_lang.to_string(), |c, v| { c.data.train_pairs_per_lang = parse("data.train_pairs_per_lang", v)?; Ok(()) };
    "data.valid_pairs_per_lang" => "data", |c| c.data.valid_pairs_per_lang.to_string(), |c, v| { c.data.valid_pairs_per_lang = parse("data.valid_pairs_per_lang", v)?; Ok(()) };
    "data.test_pairs_per_lang" => "data", |c| c.data.test_pairs_per_lang.to_string(), |c, v| { c.data.test_pairs_per_lang = parse("data.test_pairs_per_lang", v)?; Ok(()) };

    "model.enc_layers" => "model", |c| c.model.enc_layers.to_string(), |c, v| { c.model.enc_layers = parse("model.enc_layers", v)?; c.model.pde_layer = crate::model::ModelConfig::default_pde_layer(c.model.enc_layers); Ok(()) };
    "model.dec_layers" => "model", |c| c.model.dec_layers.to_string(), |c, v| { c.model.dec_layers = parse("model.dec_layers", v)?; Ok(()) };
    "model.d_model" => "model", |c| c.model.d_model.to_string(), |c, v| { c.model.d_model = parse("model.d_model", v)?; Ok(()) };
    "model.enc_ffn" => "model", |c| c.model.enc_ffn.to_string(), |c, v| { c.model.enc_ffn = parse("model.enc_ffn", v)?; Ok(()) };
    "model.dec_ffn" => "model", |c| c.model.dec_ffn.to_string(), |c, v| { c.model.dec_ffn = parse("model.dec_ffn", v)?; Ok(()) };
    "model.heads" => "model", |c| c.model.heads.to_string(), |c, v| { c.model.heads = parse("model.heads", v)?; Ok(()) };
    "model.pde_layer" => "model", |c| c.model.pde_layer.to_string(), |c, v| { c.model.pde_layer = parse("model.pde_layer", v)?; Ok(()) };
    "model.dropout" => "model", |c| c.model.dropout.to_string(), |c, v| { c.model.dropout = parse("model.dropout", v)?; Ok(()) };
    "model.max_positions" => "model", |c| c.model.max_positions.to_string(), |c, v| { c.model.max_positions = parse("model.max_positions", v)?; Ok(()) };
    "model.n_target_langs" => "model", |c| c.model.n_target_langs.to_string(), |c, v| { c.model.n_target_langs = parse("model.n_target_langs", v)?; Ok(()) };

    "train.stage1_steps" => "trainer", |c| c.train.stage1_steps.to_string(), |c, v| { c.train.stage1_steps = parse("train.stage1_steps", v)?; Ok(()) };
    "train.stage2_steps" => "trainer", |c| c.train.stage2_steps.to_string(), |c, v| { c.train.stage2_steps = parse("train.stage2_steps", v)?; Ok(()) };
    "train.batch_tokens" => "trainer", |c| c.train.batch_tokens.to_string(), |c, v| { c.train.batch_tokens = parse("train.batch_tokens", v)?; Ok(()) };
    "train.lr_stage1" => "trainer", |c| c.optimizer.lr_stage1.to_string(), |c, v| { c.optimizer.lr_stage1 = parse("train.lr_stage1", v)?; Ok(()) };
    "train.lr_stage2" => "trainer", |c| c.optimizer.lr_stage2.to_string(), |c, v| { c.optimizer.lr_stage2 = parse("train.lr_stage2", v)?; Ok(()) };
    "train.warmup_steps" => "trainer", |c| c.optimizer.warmup_steps.to_string(), |c, v| { c.optimizer.warmup_steps = parse("train.warmup_steps", v)?; Ok(()) };
    "train.beta1" => "trainer", |c| c.optimizer.beta1.to_string(), |c, v| { c.optimizer.beta1 = parse("train.beta1", v)?; Ok(()) };
    "train.beta2" => "trainer", |c| c.optimizer.beta2.to_string(), |c, v| { c.optimizer.beta2 = parse("train.beta2", v)?; Ok(()) };
    "train.eps" => "trainer", |c| c.optimizer.eps.to_string(), |c, v| { c.optimizer.eps = parse("train.eps", v)?; Ok(()) };
    "train.clip_norm" => "trainer", |c| c.optimizer.clip_norm.to_string(), |c, v| { c.optimizer.clip_norm = parse("train.clip_norm", v)?; Ok(()) };
    "train.weight_decay" => "trainer", |c| c.optimizer.weight_decay.to_string(), |c, v| { c.optimizer.weight_decay = parse("train.weight_decay", v)?; Ok(()) };
    "train.label_smoothing" => "trainer", |c| c.train.label_smoothing.to_string(), |c, v| { c.train.label_smoothing = parse("train.label_smoothing", v)?; Ok(()) };
    "train.alpha" => "data", |c| c.train.alpha.to_string(), |c, v| { c.train.alpha = parse("train.alpha", v)?; Ok(()) };
    "train.pde" => "trainer", |c| c.train.pde.to_string(), |c, v| { c.train.pde = parse_bool("train.pde", v)?; Ok(()) };
    "train.checkpoint_interval" => "trainer", |c| c.train.checkpoint_interval.to_string(), |c, v| { c.train.checkpoint_interval = parse("train.checkpoint_interval", v)?; Ok(()) };
    "train.valid_interval" => "trainer", |c| c.train.valid_interval.to_string(), |c, v| { c.train.valid_interval = parse("train.valid_interval", v)?; Ok(()) };
    "train.mlm_steps" => "trainer", |c| c.train.mlm_steps.to_string(), |c, v| { c.train.mlm_steps = parse("train.mlm_steps", v)?; Ok(()) };
    "train.mlm_batch_tokens" => "trainer", |c| c.train.mlm_batch_tokens.to_string(), |c, v| { c.train.mlm_batch_tokens = parse("train.mlm_batch_tokens", v)?; Ok(()) };
    "train.mlm_mask_ratio" => "trainer", |c| c.train.mlm_mask_ratio.to_string(), |c, v| { c.train.mlm_mask_ratio = parse("train.mlm_mask_ratio", v)?; Ok(()) };
    "train.mlm_lr" => "trainer", |c| c.train.mlm_lr.to_string(), |c, v| { c.train.mlm_lr = parse("train.mlm_lr", v)?; Ok(()) };
    "train.mlm_warmup" => "trainer", |c| c.train.mlm_warmup.to_string(), |c, v| { c.train.mlm_warmup = parse("train.mlm_warmup", v)?; Ok(()) };

    "decode.beam_size" => "decode", |c| c.decode.beam_size.to_string(), |c, v| { c.decode.beam_size = parse("decode.beam_size", v)?; Ok(()) };
    "decode.max_decode_length" => "decode", |c| c.decode.max_decode_length.to_string(), |c, v| { c.decode.max_decode_length = parse("decode.max_decode_length", v)?; Ok(()) };
    "decode.length_penalty" => "decode", |c| c.decode.length_penalty.to_string(), |c, v| { c.decode.length_penalty = parse("decode.length_penalty", v)?; Ok(()) };

    "experiment.name" => "experiments", |c| c.experiment.name.clone(), |c, v| { c.experiment.name = v.to_string(); Ok(()) };
    "experiment.seeds" => "experiments", |c| c.experiment.seeds.clone(), |c, v| { c.experiment.seeds = v.to_string(); Ok(()) };
    "experiment.aux_langs" => "experiments", |c| c.experiment.aux_langs.clone(), |c, v| { c.experiment.aux_langs = v.to_string(); Ok(()) };
    "experiment.heldout_langs" => "experiments", |c| c.experiment.heldout_langs.clone(), |c, v| { c.experiment.heldout_langs = v.to_string(); Ok(()) };
    "experiment.bt_lang" => "experiments", |c| c.experiment.bt_lang.clone(), |c, v| { c.experiment.bt_lang = v.to_string(); Ok(()) };
    "experiment.pair_budget" => "experiments", |c| c.experiment.pair_budget.to_string(), |c, v| { c.experiment.pair_budget = parse("experiment.pair_budget", v)?; Ok(()) };
    "experiment.small_budget" => "experiments", |c| c.experiment.small_budget.to_string(), |c, v| { c.experiment.small_budget = parse("experiment.small_budget", v)?; Ok(()) };
    "experiment.large_budget" => "experiments", |c| c.experiment.large_budget.to_string(), |c, v| { c.experiment.large_budget = parse("experiment.large_budget", v)?; Ok(()) };
    "experiment.probe_pairs" => "experiments", |c| c.experiment.probe_pairs.to_string(), |c, v| { c.experiment.probe_pairs = parse("experiment.probe_pairs", v)?; Ok(()) };
    "experiment.bt_mono" => "experiments", |c| c.experiment.bt_mono.to_string(), |c, v| { c.experiment.bt_mono = parse("experiment.bt_mono", v)?; Ok(()) };
    "experiment.bt_stage1_steps" => "experiments", |c| c.experiment.bt_stage1_steps.to_string(), |c, v| { c.experiment.bt_stage1_steps = parse("experiment.bt_stage1_steps", v)?; Ok(()) };
    "experiment.bt_stage2_steps" => "experiments", |c| c.experiment.bt_stage2_steps.to_string(), |c, v| { c.experiment.bt_stage2_steps = parse("experiment.bt_stage2_steps", v)?; Ok(()) };
    "experiment.round_trip_sentences" => "experiments", |c| c.experiment.round_trip_sentences.to_string(), |c, v| { c.experiment.round_trip_sentences = parse("experiment.round_trip_sentences", v)?; Ok(()) };
    "experiment.out_dir" => "experiments", |c| c.experiment.out_dir.clone(), |c, v| { c.experiment.out_dir = v.to_string(); Ok(()) };
}

impl RunConfig {
    /// Apply one configuration file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got {:?}",
                    source,
                    lineno + 1,
                    raw.trim()
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set one key; unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_key(self, key, value)?;
        // Keep the shared vocabulary in sync between data and model.
        if key == "data.vocab_size" {
            self.model.vocab_size = self.data.vocab_size;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.decode.validate()?;
        if self.model.vocab_size != self.data.vocab_size {
            return Err(Error::Config(format!(
                "model vocab {} does not match data vocab {}",
                self.model.vocab_size, self.data.vocab_size
            )));
        }
        if self.data.max_len + 2 > self.data.max_source_length {
            return Err(Error::Config(
                "data.max_len does not fit within data.max_source_length".into(),
            ));
        }
        if self.data.max_source_length > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_source_length {} exceeds model.max_positions {}",
                self.data.max_source_length, self.model.max_positions
            )));
        }
        Ok(())
    }
}
