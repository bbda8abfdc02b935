//! Masked discrete diffusion: the forward masking process, the
//! mask-and-predict objective, and the staged trainers.
//!
//! Training runs in four stages that share one loop:
//!
//! * `text_pretrain`: prompt and masked target only, no scene rows.
//! * `align`: scene-conditioned, only the projector is updated.
//! * `full`: scene-conditioned, every tensor is updated.
//! * `ar_baseline`: causal attention, next-token loss on `prompt ++ target[..L-1]`.
//!
//! Only target positions are ever masked; the prompt stays visible.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::net::{
    adamw_step, loss_and_grads, save_checkpoint, AdamWConfig, AdamWState, AttentionMode, Example, NetError, Params,
    Real, TensorGroup, ALL_GROUPS,
};
use crate::scenegen::{derive_seed, render_features, FeatureGrid, SceneError, TaskInstance};
use crate::vocab::{TokenId, MASK_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("timestep {0} outside [0, 1]")]
    Range(f64),
    #[error("target already contains [M] at position {0}")]
    MaskInTarget(usize),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocab { id: TokenId, vocab_size: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} of stage {stage}")]
    NonFinite { step: usize, stage: Stage },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A partially masked target `T_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub ids: Vec<TokenId>,
    pub mask_flags: Vec<bool>,
    pub t: f64,
}

impl MaskedSequence {
    pub fn num_masked(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }
}

/// Replaces each position with `[M]` independently with probability `t`.
pub fn forward_mask<R: Rng + ?Sized>(
    target: &[TokenId],
    t: f64,
    rng: &mut R,
) -> Result<MaskedSequence, DiffusionError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DiffusionError::Range(t));
    }
    if let Some(p) = target.iter().position(|&id| id == MASK_ID) {
        return Err(DiffusionError::MaskInTarget(p));
    }
    let mut ids = Vec::with_capacity(target.len());
    let mut mask_flags = Vec::with_capacity(target.len());
    for &id in target {
        let m = rng.gen::<f64>() < t;
        mask_flags.push(m);
        ids.push(if m { MASK_ID } else { id });
    }
    Ok(MaskedSequence { ids, mask_flags, t })
}

/// How the per-example masked cross-entropy is reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Mean over masked positions (`1 / max(1, #masked)`).
    #[default]
    MaskedMean,
    /// Plain sum over masked positions.
    Sum,
}

impl LossNorm {
    pub fn weight(self, n_masked: usize) -> f64 {
        match self {
            LossNorm::MaskedMean => 1.0 / n_masked.max(1) as f64,
            LossNorm::Sum => 1.0,
        }
    }
}

fn row_ce<T: Real>(row: &[T], target: TokenId) -> Result<f64, DiffusionError> {
    if target as usize >= row.len() {
        return Err(DiffusionError::Vocab { id: target, vocab_size: row.len() });
    }
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
    Ok(lse - row[target as usize].to_f64())
}

fn check_rows<T>(logits: &[T], vocab_size: usize, len: usize) -> Result<(), DiffusionError> {
    if vocab_size == 0 || logits.len() != vocab_size * len {
        return Err(DiffusionError::Shape(format!(
            "logits have {} values, expected {len} x {vocab_size}",
            logits.len()
        )));
    }
    Ok(())
}

/// Cross-entropy over masked rows of row-major `len x vocab_size` logits.
pub fn masked_loss<T: Real>(
    logits: &[T],
    vocab_size: usize,
    target: &[TokenId],
    mask_flags: &[bool],
    norm: LossNorm,
) -> Result<f64, DiffusionError> {
    if mask_flags.len() != target.len() {
        return Err(DiffusionError::Shape(format!("{} mask flags for {} targets", mask_flags.len(), target.len())));
    }
    check_rows(logits, vocab_size, target.len())?;
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (&id, &m)) in target.iter().zip(mask_flags).enumerate() {
        if m {
            sum += row_ce(&logits[i * vocab_size..(i + 1) * vocab_size], id)?;
            n += 1;
        }
    }
    Ok(sum * norm.weight(n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CausalLoss {
    pub loss: f64,
    /// Set when every target was `[PAD]` and the loss is defined as 0.
    pub all_pad: bool,
}

/// Mean next-token cross-entropy over non-`[PAD]` targets. Row `i` of
/// `logits` predicts `target[i]`.
pub fn causal_loss<T: Real>(logits: &[T], vocab_size: usize, target: &[TokenId]) -> Result<CausalLoss, DiffusionError> {
    check_rows(logits, vocab_size, target.len())?;
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &id) in target.iter().enumerate() {
        if id != PAD_ID {
            sum += row_ce(&logits[i * vocab_size..(i + 1) * vocab_size], id)?;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(CausalLoss { loss: 0.0, all_pad: true });
    }
    Ok(CausalLoss { loss: sum / n as f64, all_pad: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TextPretrain,
    Align,
    Full,
    ArBaseline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TextPretrain => "text_pretrain",
            Stage::Align => "align",
            Stage::Full => "full",
            Stage::ArBaseline => "ar_baseline",
        }
    }

    pub fn trainable_groups(self) -> &'static [TensorGroup] {
        match self {
            Stage::Align => &[TensorGroup::Projector],
            _ => &ALL_GROUPS,
        }
    }

    pub fn attention_mode(self) -> AttentionMode {
        match self {
            Stage::ArBaseline => AttentionMode::Causal,
            _ => AttentionMode::Bidirectional,
        }
    }

    pub fn uses_features(self) -> bool {
        !matches!(self, Stage::TextPretrain)
    }

    /// Default peak learning rate.
    pub fn default_lr(self) -> f64 {
        match self {
            Stage::Align => 1e-3,
            Stage::Full => 1e-5,
            Stage::TextPretrain | Stage::ArBaseline => 1e-3,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Training length, either in optimizer steps or in passes over the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub budget: Budget,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    #[serde(default)]
    pub loss_norm: LossNorm,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Write a checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage, budget: Budget, seed: u64) -> Self {
        Self {
            stage,
            budget,
            batch_size: 32,
            peak_lr: stage.default_lr(),
            warmup_frac: 0.03,
            seed,
            loss_norm: LossNorm::MaskedMean,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak lr must be positive, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup fraction must be in [0, 1), got {}", self.warmup_frac));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        match self.budget {
            Budget::Steps(n) => n,
            Budget::Epochs(e) => (e * dataset_len).div_ceil(self.batch_size),
        }
    }
}

/// Linear warmup from 0 followed by cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_frac * total_steps as f64).round() as usize;
        Self { peak, warmup_steps: warmup_steps.min(total_steps), total_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: f64,
}

/// Where training writes its side outputs. Both are optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Append-only JSON-lines log.
    pub log_path: Option<PathBuf>,
    /// Receives `step_XXXXXX.ckpt` files, `final.ckpt`, and
    /// `last_good.ckpt` on abort.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: Params<f32>,
    pub log: Vec<LogRecord>,
}

/// The input text and supervision for one instance under a stage.
pub fn build_example<'a, R: Rng + ?Sized>(
    inst: &TaskInstance,
    features: Option<&'a FeatureGrid>,
    stage: Stage,
    norm: LossNorm,
    rng: &mut R,
) -> Result<Example<'a>, DiffusionError> {
    let p = inst.prompt_ids.len();
    let mode = stage.attention_mode();
    if stage == Stage::ArBaseline {
        let target = &inst.target_ids;
        let mut text = inst.prompt_ids.clone();
        text.extend_from_slice(&target[..target.len().saturating_sub(1)]);
        // Non-[PAD] targets plus the first [PAD], which acts as the stop signal
        // for the fixed-length AR decoder.
        let stop = target.iter().position(|&id| id == PAD_ID).unwrap_or(target.len());
        let supervised: Vec<(usize, TokenId)> =
            (0..target.len()).filter(|&j| target[j] != PAD_ID || j == stop).map(|j| (p - 1 + j, target[j])).collect();
        let weight = 1.0 / supervised.len().max(1) as f64;
        return Ok(Example { features, text, supervised, weight, mode });
    }
    let t: f64 = rng.gen();
    let masked = forward_mask(&inst.target_ids, t, rng)?;
    let mut text = inst.prompt_ids.clone();
    text.extend_from_slice(&masked.ids);
    let supervised: Vec<(usize, TokenId)> =
        masked.mask_flags.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| (p + j, inst.target_ids[j])).collect();
    let weight = norm.weight(supervised.len());
    Ok(Example { features, text, supervised, weight, mode })
}

/// Deterministic epoch-wise shuffled index stream.
struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { n, seed, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.epoch));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn open_log(path: &Path) -> Result<BufWriter<File>, DiffusionError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?))
}

/// Runs one training stage from `params` and returns the updated parameters.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    params: Params<f32>,
    outputs: &TrainOutputs,
) -> Result<TrainResult, DiffusionError> {
    cfg.validate()?;
    if dataset.instances.is_empty() {
        return Err(DiffusionError::Config("dataset is empty".into()));
    }
    if params.config.vocab_size != dataset.vocab.len() {
        return Err(DiffusionError::Config(format!(
            "model vocabulary size {} does not match dataset vocabulary size {}",
            params.config.vocab_size,
            dataset.vocab.len()
        )));
    }
    let total = cfg.total_steps(dataset.instances.len());
    if total == 0 {
        return Err(DiffusionError::Config("training budget is zero steps".into()));
    }
    let spec = dataset.spec();
    let d_v = params.config.d_v;
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_frac, total);
    let trainable = params.trainable_mask(cfg.stage.trainable_groups());
    let mut state = AdamWState::new(&params);
    let mut params = params;
    let mut sampler = BatchSampler::new(dataset.instances.len(), derive_seed(cfg.seed, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut log_file = outputs.log_path.as_deref().map(open_log).transpose()?;
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = Vec::with_capacity(total);

    for step in 0..total {
        let idx = sampler.next_batch(cfg.batch_size);
        let grids: Vec<Option<FeatureGrid>> = idx
            .iter()
            .map(|&i| {
                cfg.stage.uses_features().then(|| render_features(&dataset.instances[i].scene, spec, d_v)).transpose()
            })
            .collect::<Result<_, _>>()?;
        let mut batch = Vec::with_capacity(idx.len());
        for (&i, g) in idx.iter().zip(&grids) {
            batch.push(build_example(&dataset.instances[i], g.as_ref(), cfg.stage, cfg.loss_norm, &mut rng)?);
        }
        let lr = schedule.lr(step);
        let (loss, grads) = match loss_and_grads(&params, &batch, &trainable) {
            Ok(r) => r,
            Err(NetError::NonFinite { .. }) => return Err(abort(cfg, step, &params, outputs, log_file)),
            Err(e) => return Err(e.into()),
        };
        if !grads.tensors.iter().flatten().all(|g| g.iter().all(|v| v.is_finite())) {
            return Err(abort(cfg, step, &params, outputs, log_file));
        }
        adamw_step(&mut params, &grads, &mut state, lr, &cfg.optimizer)?;
        let rec = LogRecord { step, stage: cfg.stage, lr, loss };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
        }
        log.push(rec);
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < total {
                save_checkpoint(&params, &dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        save_checkpoint(&params, &dir.join("final.ckpt"))?;
    }
    Ok(TrainResult { params, log })
}

fn abort(
    cfg: &TrainConfig,
    step: usize,
    params: &Params<f32>,
    outputs: &TrainOutputs,
    log_file: Option<BufWriter<File>>,
) -> DiffusionError {
    if let Some(mut f) = log_file {
        let _ = f.flush();
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        if let Err(e) = save_checkpoint(params, &dir.join("last_good.ckpt")) {
            return e.into();
        }
    }
    DiffusionError::NonFinite { step, stage: cfg.stage }
}

/// Median of the losses in the first and last `frac` of a log.
pub fn loss_trend(log: &[LogRecord], frac: f64) -> Option<(f64, f64)> {
    let k = ((log.len() as f64 * frac).ceil() as usize).max(1);
    if log.len() < 2 * k {
        return None;
    }
    let median = |xs: &[LogRecord]| {
        let mut v: Vec<f64> = xs.iter().map(|r| r.loss).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        let m = v.len() / 2;
        if v.len().is_multiple_of(2) {
            0.5 * (v[m - 1] + v[m])
        } else {
            v[m]
        }
    };
    Some((median(&log[..k]), median(&log[log.len() - k..])))
}
