//! Transformer encoder-decoder with tied embeddings, per-stage parameter
//! partitions, target-language-aware projections and an optional
//! positional-disentangled encoder layer.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

mod transformer;

pub use transformer::{
    apply_target_projection, decoder_logits, decoder_logits_eval, encode, encode_memory,
    encode_pooled, nll_node, pad_key_mask, sequence_nll, sequence_nll_sum, teacher_forcing_split,
    EncodeOut, Forward, Memory, Mode,
};

/// Architecture hyperparameters.
///
/// `pde_layer` is 1-based and defaults to the penultimate encoder layer.
/// The reference full-scale setting (24 encoder layers at d_model 1024 with
/// a 12-layer decoder) stays expressible; the defaults are desk-scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub enc_ffn: usize,
    pub dec_ffn: usize,
    pub heads: usize,
    pub pde_enabled: bool,
    pub pde_layer: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_target_langs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 2,
            d_model: 128,
            enc_ffn: 256,
            dec_ffn: 256,
            heads: 4,
            pde_enabled: false,
            pde_layer: 3,
            dropout: 0.1,
            vocab_size: 416,
            max_positions: 64,
            n_target_langs: 1,
        }
    }
}

impl ModelConfig {
    /// The full-scale reference configuration (not meant to be trained here,
    /// only to stay representable).
    pub fn paper_scale() -> Self {
        ModelConfig {
            enc_layers: 24,
            dec_layers: 12,
            d_model: 1024,
            enc_ffn: 4096,
            dec_ffn: 3072,
            heads: 16,
            pde_enabled: false,
            pde_layer: 23,
            dropout: 0.1,
            vocab_size: 250_002,
            max_positions: 512,
            n_target_langs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be positive and divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.pde_layer == 0 || self.pde_layer > self.enc_layers {
            return Err(Error::Config(format!(
                "pde_layer {} outside 1..={}",
                self.pde_layer, self.enc_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab size {} cannot hold the reserved framing tokens",
                self.vocab_size
            )));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        if self.n_target_langs == 0 {
            return Err(Error::Config("n_target_langs must be at least 1".into()));
        }
        Ok(())
    }

    /// 0-based index of the positional-disentangled layer.
    pub fn pde_index(&self) -> usize {
        self.pde_layer - 1
    }

    /// Default `pde_layer` for a given depth: the penultimate layer.
    pub fn default_pde_layer(enc_layers: usize) -> usize {
        enc_layers.saturating_sub(1).max(1)
    }
}

pub const EMBED_TOKENS: &str = "embed.tokens";
pub const EMBED_POS: &str = "embed.pos";

/// Named parameter store. The token embedding is a single tensor serving as
/// encoder input embedding, decoder input embedding, and output projection.
#[derive(Debug, Clone)]
pub struct ModelState {
    params: BTreeMap<String, Tensor>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn uniform_init(dims: &[usize], scale: f64, seed: u64, name: &str) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(dims, data).expect("init dims are consistent")
}

fn attn_names(prefix: &str) -> Vec<(String, Kind)> {
    let mut v = Vec::new();
    for w in ["wq", "wk", "wv", "wo"] {
        v.push((format!("{prefix}.{w}"), Kind::Square));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        v.push((format!("{prefix}.{b}"), Kind::BiasD));
    }
    v
}

fn norm_names(prefix: &str) -> Vec<(String, Kind)> {
    vec![
        (format!("{prefix}.gamma"), Kind::Gamma),
        (format!("{prefix}.beta"), Kind::BiasD),
    ]
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Square,  // [d, d]
    BiasD,   // [d]
    Gamma,   // [d], ones
    FfnW1,   // [d, ffn]
    FfnB1,   // [ffn]
    FfnW2,   // [ffn, d]
}

fn layer_names(side: &str, index: usize, cross_attention: bool) -> Vec<(String, Kind)> {
    let mut v = attn_names(&format!("{side}.{index}.sa"));
    v.extend(norm_names(&format!("{side}.{index}.sa_norm")));
    if cross_attention {
        v.extend(attn_names(&format!("{side}.{index}.ca")));
        v.extend(norm_names(&format!("{side}.{index}.ca_norm")));
    }
    v.push((format!("{side}.{index}.ffn.w1"), Kind::FfnW1));
    v.push((format!("{side}.{index}.ffn.b1"), Kind::FfnB1));
    v.push((format!("{side}.{index}.ffn.w2"), Kind::FfnW2));
    v.push((format!("{side}.{index}.ffn.b2"), Kind::BiasD));
    v.extend(norm_names(&format!("{side}.{index}.ffn_norm")));
    v
}

impl ModelState {
    fn build(cfg: &ModelConfig, seed: u64, encoder_only: bool) -> Result<ModelState> {
        cfg.validate()?;
        let d = cfg.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let mut params = BTreeMap::new();
        let mut insert = |name: String, dims: Vec<usize>, kind: Kind| {
            let t = match kind {
                Kind::Gamma => Tensor::filled(&dims, 1.0),
                Kind::BiasD | Kind::FfnB1 => Tensor::zeros(&dims),
                _ => uniform_init(&dims, scale, seed, &name),
            };
            params.insert(name, t);
        };
        insert(EMBED_TOKENS.into(), vec![cfg.vocab_size, d], Kind::Square);
        insert(EMBED_POS.into(), vec![cfg.max_positions, d], Kind::Square);
        for i in 0..cfg.enc_layers {
            for (name, kind) in layer_names("enc", i, false) {
                let dims = match kind {
                    Kind::Square => vec![d, d],
                    Kind::BiasD | Kind::Gamma => vec![d],
                    Kind::FfnW1 => vec![d, cfg.enc_ffn],
                    Kind::FfnB1 => vec![cfg.enc_ffn],
                    Kind::FfnW2 => vec![cfg.enc_ffn, d],
                };
                insert(name, dims, kind);
            }
        }
        if !encoder_only {
            for i in 0..cfg.dec_layers {
                for (name, kind) in layer_names("dec", i, true) {
                    let dims = match kind {
                        Kind::Square => vec![d, d],
                        Kind::BiasD | Kind::Gamma => vec![d],
                        Kind::FfnW1 => vec![d, cfg.dec_ffn],
                        Kind::FfnB1 => vec![cfg.dec_ffn],
                        Kind::FfnW2 => vec![cfg.dec_ffn, d],
                    };
                    insert(name, dims, kind);
                }
            }
            if cfg.n_target_langs > 1 {
                for j in 0..cfg.n_target_langs {
                    insert(format!("proj.lang{j}.w"), vec![d, d], Kind::Square);
                }
            }
        }
        Ok(ModelState { params })
    }

    /// Encoder-plus-embeddings model for masked-LM pretraining.
    pub fn init_encoder_only(cfg: &ModelConfig, seed: u64) -> Result<ModelState> {
        ModelState::build(cfg, seed, true)
    }

    /// Full model; encoder tensors and embeddings may be copied from a
    /// pretrained encoder-only snapshot (widened from its f32 payloads).
    pub fn init(
        cfg: &ModelConfig,
        seed: u64,
        pretrained_encoder: Option<&BTreeMap<String, Tensor>>,
    ) -> Result<ModelState> {
        let mut state = ModelState::build(cfg, seed, false)?;
        if let Some(pre) = pretrained_encoder {
            for (name, tensor) in pre {
                let Some(slot) = state.params.get_mut(name) else {
                    return Err(Error::Checkpoint(format!(
                        "pretrained tensor {} has no place in this model",
                        name
                    )));
                };
                if slot.dims() != tensor.dims() {
                    return Err(Error::Checkpoint(format!(
                        "pretrained tensor {} has dims {:?}, model expects {:?}",
                        name,
                        tensor.dims(),
                        slot.dims()
                    )));
                }
                *slot = tensor.clone();
            }
            for name in state.params.keys() {
                let is_encoder = name.starts_with("enc.") || name.starts_with("embed.");
                if is_encoder && !pre.contains_key(name) {
                    return Err(Error::Checkpoint(format!(
                        "pretrained snapshot is missing encoder tensor {}",
                        name
                    )));
                }
            }
        }
        Ok(state)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {}", name)))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn is_encoder_only(&self) -> bool {
        !self.params.keys().any(|n| n.starts_with("dec."))
    }

    /// The tensors a masked-LM pretraining checkpoint carries.
    pub fn encoder_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("enc.") || n.starts_with("embed."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }
}

/// Training stages of the two-stage recipe. Reverse stages train the
/// pivot-to-low-resource model and use identical partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingStage {
    Stage1,
    Stage2,
    ReverseStage1,
    ReverseStage2,
}

impl TrainingStage {
    pub fn is_first(&self) -> bool {
        matches!(self, TrainingStage::Stage1 | TrainingStage::ReverseStage1)
    }

    pub fn label(&self) -> &'static str {
        match self {
            TrainingStage::Stage1 => "stage1",
            TrainingStage::Stage2 => "stage2",
            TrainingStage::ReverseStage1 => "rev1",
            TrainingStage::ReverseStage2 => "rev2",
        }
    }
}

/// The trainable/frozen split. Disjoint, and the union covers every
/// parameter name.
#[derive(Debug, Clone)]
pub struct ParameterPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl ParameterPartition {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }
}

/// Stage 1 trains decoder layers and target projections with the encoder
/// and all embeddings frozen; stage 2 additionally trains the encoder.
/// Embeddings stay frozen in every stage.
pub fn partition_for_stage(state: &ModelState, stage: TrainingStage) -> ParameterPartition {
    let mut trainable = BTreeSet::new();
    let mut frozen = BTreeSet::new();
    for name in state.names() {
        let group_trainable = if name.starts_with("embed.") {
            false
        } else if name.starts_with("enc.") {
            !stage.is_first()
        } else {
            // Decoder layers and target projections train in both stages.
            true
        };
        if group_trainable {
            trainable.insert(name.clone());
        } else {
            frozen.insert(name.clone());
        }
    }
    ParameterPartition { trainable, frozen }
}

/// Every parameter trainable (the ft-all baseline and masked-LM pretraining).
pub fn partition_all_trainable(state: &ModelState) -> ParameterPartition {
    ParameterPartition {
        trainable: state.names().cloned().collect(),
        frozen: BTreeSet::new(),
    }
}
