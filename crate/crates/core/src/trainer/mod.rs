//! Training: the two-stage freeze-scheduled fine-tune, the all-parameters
//! baseline, masked-LM pretraining, checkpointing and back-translation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{sample_batch, MultilingualCorpus, PadMatrix, SamplingPolicy, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{
    nll_node, partition_all_trainable, partition_for_stage, Forward, Mode, ModelConfig,
    ModelState, ParameterPartition, TrainingStage,
};

mod adam;
mod backtranslate;
mod checkpoint;
mod mlm;
mod schedule;

pub use adam::{adam_step, clip_gradients, AdamState, OptimizerConfig};
pub use backtranslate::{
    build_backtranslation_corpus, select_by_round_trip, select_checkpoint_by_round_trip,
    RoundTripSelection,
};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint, Checkpoint,
    RngState, FORMAT_VERSION, MAGIC,
};
pub use mlm::{encoder_checkpoint, mask_batch, mlm_accuracy, pretrain_mlm, MlmConfig, MlmOutcome};
pub use schedule::{lr_at, warmup_inv_sqrt};

/// Per-stage run settings.
#[derive(Debug, Clone)]
pub struct TrainStageConfig {
    pub stage: TrainingStage,
    pub steps: usize,
    pub batch_tokens: usize,
    pub pde_enabled_this_stage: bool,
}

impl TrainStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("stage steps must be positive".into()));
        }
        if self.stage.is_first() && self.pde_enabled_this_stage {
            return Err(Error::Config(
                "the positional-disentangled layer only activates at the second stage".into(),
            ));
        }
        Ok(())
    }
}

/// Options shared by every training entry point.
#[derive(Debug, Clone)]
pub struct TrainerOptions {
    pub optimizer: OptimizerConfig,
    pub label_smoothing: f64,
    /// Steps between checkpoints; 0 means a tenth of the stage.
    pub checkpoint_interval: usize,
    /// Steps between validation passes; 0 means a tenth of the stage.
    pub valid_interval: usize,
    /// Where checkpoints and the training log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        TrainerOptions {
            optimizer: OptimizerConfig::default(),
            label_smoothing: 0.0,
            checkpoint_interval: 0,
            valid_interval: 0,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: TrainingStage,
    pub final_train_loss: f64,
    pub final_valid_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub clip_activations: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stages: Vec<StageOutcome>,
    /// The append-only training log (`step<TAB>stage<TAB>lr<TAB>train_loss<TAB>valid_loss`).
    pub log: String,
}

/// Mean NLL over a fixed pair list in evaluation mode, batched in order.
pub fn evaluate_nll(
    state: &ModelState,
    cfg: &ModelConfig,
    pairs: &[(TokenSequence, TokenSequence)],
    batch_tokens: usize,
    target_lang_index: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no validation pairs".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut start = 0usize;
    while start < pairs.len() {
        let mut end = start;
        let mut width = 0usize;
        while end < pairs.len() {
            let cand = width.max(pairs[end].0.len()).max(pairs[end].1.len());
            if end > start && (end - start + 1) * cand > batch_tokens {
                break;
            }
            width = cand;
            end += 1;
        }
        let src: Vec<&TokenSequence> = pairs[start..end].iter().map(|p| &p.0).collect();
        let tgt: Vec<&TokenSequence> = pairs[start..end].iter().map(|p| &p.1).collect();
        let src_m = PadMatrix::from_sequences(&src)?;
        let tgt_m = PadMatrix::from_sequences(&tgt)?;
        let count: usize = tgt_m.lens.iter().map(|l| l - 1).sum();
        let mut graph = Graph::new();
        let mut fw = Forward::new(&mut graph, state, cfg.dropout, Mode::Eval);
        let loss = nll_node(&mut fw, cfg, &src_m, &tgt_m, target_lang_index)?;
        total += graph.value(loss).item()? * count as f64;
        tokens += count;
        start = end;
    }
    Ok(total / tokens as f64)
}

struct StageRunner<'a> {
    state: &'a mut ModelState,
    cfg: ModelConfig,
    train: &'a MultilingualCorpus,
    valid: &'a [(TokenSequence, TokenSequence)],
    policy: &'a SamplingPolicy,
    opts: &'a TrainerOptions,
    target_lang_index: usize,
    log: &'a mut String,
}

impl StageRunner<'_> {
    /// One optimisation stage: sample, forward, backward, clip, Adam.
    fn run(
        &mut self,
        stage_cfg: &TrainStageConfig,
        partition: &ParameterPartition,
        rng: &mut ChaCha8Rng,
        ckpt_prefix: &str,
    ) -> Result<StageOutcome> {
        stage_cfg.validate()?;
        let mut cfg = self.cfg.clone();
        cfg.pde_enabled = stage_cfg.pde_enabled_this_stage;
        let mut moments = AdamState::new(self.state);
        let ckpt_every = effective_interval(self.opts.checkpoint_interval, stage_cfg.steps);
        let valid_every = effective_interval(self.opts.valid_interval, stage_cfg.steps);
        let mut checkpoints = Vec::new();
        let mut clip_activations = 0usize;
        let mut train_loss = f64::NAN;
        let mut last_valid = None;
        for step in 1..=stage_cfg.steps {
            let lr = lr_at(step, stage_cfg.stage, &self.opts.optimizer);
            let batch = sample_batch(self.train, self.policy, stage_cfg.batch_tokens, rng)?;
            let mut graph = Graph::new();
            let loss_node = {
                let mut fw = Forward::new(
                    &mut graph,
                    self.state,
                    cfg.dropout,
                    Mode::Train {
                        rng: &mut *rng,
                        partition,
                    },
                );
                nll_with_smoothing(
                    &mut fw,
                    &cfg,
                    &batch.src,
                    &batch.tgt,
                    self.target_lang_index,
                    self.opts.label_smoothing,
                )?
            };
            train_loss = graph.value(loss_node).item()?;
            let mut grads = graph.backward(loss_node)?;
            drop(graph);
            let (_norm, clipped) = clip_gradients(&mut grads, self.opts.optimizer.clip_norm);
            if clipped {
                clip_activations += 1;
            }
            adam_step(
                self.state,
                &mut moments,
                &grads,
                partition,
                step,
                lr,
                &self.opts.optimizer,
            )?;

            let mut valid_field = "-".to_string();
            if step % valid_every == 0 || step == stage_cfg.steps {
                let v = evaluate_nll(
                    self.state,
                    &cfg,
                    self.valid,
                    stage_cfg.batch_tokens,
                    self.target_lang_index,
                )?;
                if !v.is_finite() {
                    self.save_snapshot(&moments, &cfg, step, rng, ckpt_prefix, "diverged")?;
                    return Err(Error::Diverged(format!(
                        "validation loss {} at {} step {}",
                        v,
                        stage_cfg.stage.label(),
                        step
                    )));
                }
                last_valid = Some(v);
                valid_field = format!("{:.6}", v);
            }
            writeln!(
                self.log,
                "{}\t{}\t{:.6e}\t{:.6}\t{}",
                step,
                stage_cfg.stage.label(),
                lr,
                train_loss,
                valid_field
            )
            .expect("writing to a string cannot fail");
            if step % ckpt_every == 0 || step == stage_cfg.steps {
                if let Some(path) =
                    self.save_snapshot(&moments, &cfg, step, rng, ckpt_prefix, "ckpt")?
                {
                    checkpoints.push(path);
                }
            }
        }
        Ok(StageOutcome {
            stage: stage_cfg.stage,
            final_train_loss: train_loss,
            final_valid_loss: last_valid,
            checkpoints,
            clip_activations,
        })
    }

    fn save_snapshot(
        &self,
        moments: &AdamState,
        cfg: &ModelConfig,
        step: usize,
        rng: &ChaCha8Rng,
        prefix: &str,
        kind: &str,
    ) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.opts.out_dir else {
            return Ok(None);
        };
        let mut ckpt = Checkpoint::new(
            cfg.clone(),
            step as u64,
            self.state.params().clone(),
            RngState::capture(rng),
        );
        ckpt.adam_m = moments.m.clone();
        ckpt.adam_v = moments.v.clone();
        let path = dir.join(format!("{}_{}_{:06}.sxtp", kind, prefix, step));
        save_checkpoint(&ckpt, &path)?;
        Ok(Some(path))
    }
}

fn nll_with_smoothing(
    fw: &mut Forward,
    cfg: &ModelConfig,
    src: &PadMatrix,
    tgt: &PadMatrix,
    target_lang_index: usize,
    smoothing: f64,
) -> Result<crate::autograd::NodeId> {
    if smoothing == 0.0 {
        return nll_node(fw, cfg, src, tgt, target_lang_index);
    }
    // Same path as nll_node but with a smoothed loss head.
    let enc = crate::model::encode(fw, cfg, src)?;
    let projected = crate::model::apply_target_projection(fw, cfg, enc.hidden, target_lang_index)?;
    let (tgt_in, targets) = crate::model::teacher_forcing_split(tgt);
    let logits = crate::model::decoder_logits(fw, cfg, projected, enc.key_mask, &tgt_in)?;
    fw.graph
        .cross_entropy_smoothed(logits, targets, crate::data::PAD, smoothing)
}

fn effective_interval(requested: usize, steps: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        (steps / 10).max(1)
    }
}

/// Run a sequence of stages with their freeze partitions; used by the
/// two-stage recipes below.
#[allow(clippy::too_many_arguments)]
pub fn train_stages(
    state: &mut ModelState,
    cfg: &ModelConfig,
    train: &MultilingualCorpus,
    valid: &[(TokenSequence, TokenSequence)],
    policy: &SamplingPolicy,
    stages: &[TrainStageConfig],
    opts: &TrainerOptions,
    seed: u64,
    target_lang_index: usize,
) -> Result<TrainOutcome> {
    opts.optimizer.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = String::new();
    let mut outcomes = Vec::new();
    for stage_cfg in stages {
        let partition = partition_for_stage(state, stage_cfg.stage);
        let mut runner = StageRunner {
            state,
            cfg: cfg.clone(),
            train,
            valid,
            policy,
            opts,
            target_lang_index,
            log: &mut log,
        };
        outcomes.push(runner.run(stage_cfg, &partition, &mut rng, stage_cfg.stage.label())?);
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::write(dir.join("train.log"), &log)?;
    }
    Ok(TrainOutcome {
        stages: outcomes,
        log,
    })
}

/// The two-stage recipe: decoder-only training with a frozen encoder, then
/// joint training with frozen embeddings (and the PDE layer if requested).
#[allow(clippy::too_many_arguments)]
pub fn train_transf(
    state: &mut ModelState,
    cfg: &ModelConfig,
    train: &MultilingualCorpus,
    valid: &[(TokenSequence, TokenSequence)],
    policy: &SamplingPolicy,
    stage1_steps: usize,
    stage2_steps: usize,
    batch_tokens: usize,
    use_pde: bool,
    opts: &TrainerOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    let stages = [
        TrainStageConfig {
            stage: TrainingStage::Stage1,
            steps: stage1_steps,
            batch_tokens,
            pde_enabled_this_stage: false,
        },
        TrainStageConfig {
            stage: TrainingStage::Stage2,
            steps: stage2_steps,
            batch_tokens,
            pde_enabled_this_stage: use_pde,
        },
    ];
    train_stages(state, cfg, train, valid, policy, &stages, opts, seed, 0)
}

/// The reverse-direction variant (pivot to low-resource): the same two-stage
/// schedule, never with PDE.
#[allow(clippy::too_many_arguments)]
pub fn train_reverse(
    state: &mut ModelState,
    cfg: &ModelConfig,
    train: &MultilingualCorpus,
    valid: &[(TokenSequence, TokenSequence)],
    policy: &SamplingPolicy,
    stage1_steps: usize,
    stage2_steps: usize,
    batch_tokens: usize,
    opts: &TrainerOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    let stages = [
        TrainStageConfig {
            stage: TrainingStage::ReverseStage1,
            steps: stage1_steps,
            batch_tokens,
            pde_enabled_this_stage: false,
        },
        TrainStageConfig {
            stage: TrainingStage::ReverseStage2,
            steps: stage2_steps,
            batch_tokens,
            pde_enabled_this_stage: false,
        },
    ];
    train_stages(state, cfg, train, valid, policy, &stages, opts, seed, 0)
}

/// Baseline that directly optimises all model parameters in one stage under
/// the stage-1 learning-rate schedule.
#[allow(clippy::too_many_arguments)]
pub fn train_ft_all(
    state: &mut ModelState,
    cfg: &ModelConfig,
    train: &MultilingualCorpus,
    valid: &[(TokenSequence, TokenSequence)],
    policy: &SamplingPolicy,
    steps: usize,
    batch_tokens: usize,
    opts: &TrainerOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    opts.optimizer.validate()?;
    let stage_cfg = TrainStageConfig {
        stage: TrainingStage::Stage1,
        steps,
        batch_tokens,
        pde_enabled_this_stage: false,
    };
    let partition = partition_all_trainable(state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = String::new();
    let outcome = {
        let mut runner = StageRunner {
            state,
            cfg: cfg.clone(),
            train,
            valid,
            policy,
            opts,
            target_lang_index: 0,
            log: &mut log,
        };
        runner.run(&stage_cfg, &partition, &mut rng, "ftall")?
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::write(dir.join("train.log"), &log)?;
    }
    Ok(TrainOutcome {
        stages: vec![outcome],
        log,
    })
}

/// Rebuild a model from a checkpoint: the tensor names must match the
/// registry of a freshly configured model (full or encoder-only) and every
/// payload must carry the registered dims.
pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelState> {
    let encoder_only = !ckpt.params.keys().any(|n| n.starts_with("dec."));
    let mut state = if encoder_only {
        ModelState::init_encoder_only(&ckpt.config, 0)?
    } else {
        ModelState::init(&ckpt.config, 0, None)?
    };
    ckpt.check_registry(state.names().cloned())?;
    for (name, tensor) in &ckpt.params {
        let slot = state.get_mut(name)?;
        if slot.dims() != tensor.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has dims {:?}, the model expects {:?}",
                name,
                tensor.dims(),
                slot.dims()
            )));
        }
        *slot = tensor.clone();
    }
    Ok(state)
}

/// Snapshot helper for freeze-exactness checks and model hand-off.
pub fn snapshot(state: &ModelState, cfg: &ModelConfig, step: u64, seed: u64) -> Checkpoint {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    Checkpoint::new(cfg.clone(), step, state.params().clone(), RngState::capture(&rng))
}

/// Serialized f32 payloads per tensor, for byte-exact freeze comparisons.
pub fn payload_bytes(state: &ModelState) -> BTreeMap<String, Vec<u8>> {
    state
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.to_f32_le_bytes()))
        .collect()
}

/// Write parallel corpora paths for a synthetic back-translation dataset.
pub fn backtranslation_pair_name(lang: &crate::data::LanguageId) -> String {
    format!("bt_{}", lang)
}

#[cfg(test)]
mod tests;
