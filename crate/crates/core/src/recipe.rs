//! Named end-to-end training recipes and a checkpoint cache keyed by recipe hash.
//!
//! A recipe fixes everything that determines the trained weights: data
//! generation, model shape, and per-stage step budgets and learning rates.
//! The diffusion model runs text pretraining, projector alignment and full
//! tuning in turn; the causal baseline gets the same shape, data and total
//! step count, trained from scratch in one stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, TaskMix};
use crate::diffusion::{train, Budget, DiffusionError, Stage, TrainConfig, TrainOutputs};
use crate::net::{load_checkpoint, save_checkpoint, AttentionMode, ModelConfig, NetError, Params, CHECKPOINT_VERSION};
use crate::scenegen::{GenSpec, SceneError, Task};

#[derive(Debug, thiserror::Error)]
pub enum RecipeError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Transformer width, depth and head count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl ModelShape {
    /// Full model configuration for a dataset's scenes and vocabulary.
    pub fn config(&self, ds: &Dataset, mode: AttentionMode) -> ModelConfig {
        let spec = ds.spec();
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_v: spec.feature_channels(),
            n_patches: spec.n_patches(),
            max_text_len: max_text_len(),
            vocab_size: ds.vocab.len(),
            attention_mode: mode,
            vocab_hash: Some(ds.manifest.vocab_hash.clone()),
        }
    }
}

/// Longest prompt (grounding: 4 tokens) plus the longest template.
pub fn max_text_len() -> usize {
    4 + Task::ALL.iter().map(|t| t.target_len()).max().unwrap_or(32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub spec: GenSpec,
    pub coord_bins: u32,
    pub task_mix: TaskMix,
    pub train_size: usize,
    pub train_seed: u64,
    /// Held-out split: detection only, since the ablations score detection.
    pub eval_size: usize,
    pub eval_seed: u64,
    pub shape: ModelShape,
    pub batch_size: usize,
    pub seed: u64,
    pub pretrain: StagePlan,
    pub align: StagePlan,
    pub full: StagePlan,
}

/// Weights and data produced by a recipe.
#[derive(Debug, Clone)]
pub struct Trained {
    pub diffusion: Params<f32>,
    pub ar: Params<f32>,
    pub train: Dataset,
    pub eval: Dataset,
    /// True when the weights came from the cache.
    pub cached: bool,
}

impl Recipe {
    /// Default desk-scale recipe: ~10k instances, d=128, 4 layers.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            spec: GenSpec::default(),
            coord_bins: 100,
            task_mix: TaskMix::new(&[
                (Task::Caption, 0.10),
                (Task::Detect, 0.70),
                (Task::Ground, 0.10),
                (Task::Classify, 0.10),
            ]),
            train_size: 10_000,
            train_seed: 1,
            eval_size: 300,
            eval_seed: 1001,
            shape: ModelShape { d_model: 128, n_layers: 4, n_heads: 4 },
            batch_size: 32,
            seed: 7,
            pretrain: StagePlan { steps: 400, lr: 1e-3 },
            align: StagePlan { steps: 300, lr: 1e-3 },
            full: StagePlan { steps: 8000, lr: 1e-3 },
        }
    }

    /// Miniature recipe for fast end-to-end checks.
    pub fn smoke() -> Self {
        Self {
            name: "smoke".into(),
            task_mix: TaskMix::new(&[
                (Task::Caption, 0.25),
                (Task::Detect, 0.25),
                (Task::Ground, 0.25),
                (Task::Classify, 0.25),
            ]),
            train_size: 200,
            eval_size: 40,
            shape: ModelShape { d_model: 32, n_layers: 2, n_heads: 2 },
            batch_size: 16,
            pretrain: StagePlan { steps: 100, lr: 1e-3 },
            align: StagePlan { steps: 100, lr: 1e-3 },
            full: StagePlan { steps: 100, lr: 1e-3 },
            ..Self::desk()
        }
    }

    /// SHA-256 of the recipe JSON and the checkpoint format version.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("recipe serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.update(CHECKPOINT_VERSION.to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Causal-baseline step budget: the diffusion model's total.
    pub fn ar_steps(&self) -> usize {
        self.pretrain.steps + self.align.steps + self.full.steps
    }

    pub fn train_dataset(&self) -> Result<Dataset, RecipeError> {
        Ok(Dataset::generate(&self.spec, self.train_seed, self.train_size, &self.task_mix, self.coord_bins)?)
    }

    pub fn eval_dataset(&self) -> Result<Dataset, RecipeError> {
        Ok(Dataset::generate(
            &self.spec,
            self.eval_seed,
            self.eval_size,
            &TaskMix::only(Task::Detect),
            self.coord_bins,
        )?)
    }

    fn stage_config(&self, stage: Stage, plan: StagePlan) -> TrainConfig {
        let mut c = TrainConfig::new(stage, Budget::Steps(plan.steps), self.seed);
        c.peak_lr = plan.lr;
        c.batch_size = self.batch_size;
        c
    }

    /// Runs the three diffusion stages from a fresh initialization.
    pub fn train_diffusion(&self, ds: &Dataset) -> Result<Params<f32>, RecipeError> {
        let cfg = self.shape.config(ds, AttentionMode::Bidirectional);
        let mut p = Params::init(&cfg, self.seed)?;
        for (stage, plan) in
            [(Stage::TextPretrain, self.pretrain), (Stage::Align, self.align), (Stage::Full, self.full)]
        {
            p = train(&self.stage_config(stage, plan), ds, p, &TrainOutputs::default())?.params;
        }
        Ok(p)
    }

    /// Trains the causal baseline from scratch on the matched budget.
    pub fn train_ar(&self, ds: &Dataset) -> Result<Params<f32>, RecipeError> {
        let cfg = self.shape.config(ds, AttentionMode::Causal);
        let p = Params::init(&cfg, self.seed)?;
        let plan = StagePlan { steps: self.ar_steps(), lr: self.full.lr };
        Ok(train(&self.stage_config(Stage::ArBaseline, plan), ds, p, &TrainOutputs::default())?.params)
    }

    /// Loads both models from `cache_root/<name>-<hash>/` or trains and stores them.
    pub fn load_or_train(&self, cache_root: &Path) -> Result<Trained, RecipeError> {
        let dir = cache_root.join(format!("{}-{}", self.name, &self.hash()[..16]));
        let (diff_path, ar_path) = (dir.join("diffusion.ckpt"), dir.join("ar.ckpt"));
        let train_ds = self.train_dataset()?;
        let eval = self.eval_dataset()?;
        if diff_path.is_file() && ar_path.is_file() {
            let diffusion = load_checkpoint(&diff_path)?;
            let ar = load_checkpoint(&ar_path)?;
            return Ok(Trained { diffusion, ar, train: train_ds, eval, cached: true });
        }
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RecipeError::Io { path, source }
        };
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let recipe_path = dir.join("recipe.json");
        fs::write(&recipe_path, serde_json::to_string_pretty(self).expect("recipe serializes"))
            .map_err(io(&recipe_path))?;
        let diffusion = self.train_diffusion(&train_ds)?;
        save_checkpoint(&diffusion, &diff_path)?;
        let ar = self.train_ar(&train_ds)?;
        save_checkpoint(&ar, &ar_path)?;
        Ok(Trained { diffusion, ar, train: train_ds, eval, cached: false })
    }
}
