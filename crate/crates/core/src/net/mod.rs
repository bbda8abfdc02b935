//! The differentiable core: feature projector, token embedding, a pre-norm
//! transformer trunk with bidirectional or causal attention, and the
//! vocabulary head, with hand-written gradients.
//!
//! Parameters live in a flat list of named tensors in a fixed order so the
//! optimizer, the freeze mask and the checkpoint format can treat them
//! uniformly. [`Layout`] maps roles to positions in that list.

mod checkpoint;
pub mod gradcheck;
mod model;
mod optim;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{checkpoint_size, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{forward, loss_and_grads, project, Example, ForwardOutput};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use tensor::Real;

use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocab { id: TokenId, vocab_size: usize },
    #[error("text length {len} exceeds max_text_len {max}")]
    Length { len: usize, max: usize },
    #[error("non-finite loss at batch instance {instance}")]
    NonFinite { instance: usize },
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Raw scene-feature width.
    pub d_v: usize,
    pub n_patches: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub attention_mode: AttentionMode,
    /// Hash of the vocabulary the model was built for, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.d_v == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_text_len < 32 {
            return bad(format!("max_text_len {} is below the longest task template (32)", self.max_text_len));
        }
        Ok(())
    }

    /// Checks that `text` fits the context and vocabulary.
    pub fn check_text(&self, text: &[TokenId]) -> Result<(), NetError> {
        if text.len() > self.max_text_len {
            return Err(NetError::Length { len: text.len(), max: self.max_text_len });
        }
        if let Some(&id) = text.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(NetError::Vocab { id, vocab_size: self.vocab_size });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn positions(&self) -> usize {
        self.n_patches + self.max_text_len
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, v, f) = (self.d_model, self.vocab_size, self.ffn_dim());
        let projector = self.d_v * d + d + d * d + d;
        let embeddings = v * d + self.positions() * d;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let head = 2 * d + d * v + v;
        projector + embeddings + self.n_layers * block + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Projector,
    Embedding,
    Trunk,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: TensorGroup,
    pub data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensor indices for each role.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    n_layers: usize,
}

pub(crate) const PER_BLOCK: usize = 12;

impl Layout {
    pub const PROJ_W1: usize = 0;
    pub const PROJ_B1: usize = 1;
    pub const PROJ_W2: usize = 2;
    pub const PROJ_B2: usize = 3;
    pub const TOK_EMB: usize = 4;
    pub const POS_EMB: usize = 5;
    const BLOCKS: usize = 6;

    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const QKV_W: usize = 2;
    pub const QKV_B: usize = 3;
    pub const OUT_W: usize = 4;
    pub const OUT_B: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FF1_W: usize = 8;
    pub const FF1_B: usize = 9;
    pub const FF2_W: usize = 10;
    pub const FF2_B: usize = 11;

    pub fn new(n_layers: usize) -> Self {
        Self { n_layers }
    }

    pub fn block(&self, layer: usize, part: usize) -> usize {
        debug_assert!(layer < self.n_layers && part < PER_BLOCK);
        Self::BLOCKS + layer * PER_BLOCK + part
    }

    pub fn lnf_g(&self) -> usize {
        Self::BLOCKS + self.n_layers * PER_BLOCK
    }

    pub fn lnf_b(&self) -> usize {
        self.lnf_g() + 1
    }

    pub fn head_w(&self) -> usize {
        self.lnf_g() + 2
    }

    pub fn head_b(&self) -> usize {
        self.lnf_g() + 3
    }

    pub fn len(&self) -> usize {
        self.lnf_g() + 4
    }
}

fn tensor_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, TensorGroup, Init)> {
    use Init::*;
    use TensorGroup::*;
    let (d, f) = (c.d_model, c.ffn_dim());
    let mut out = vec![
        ("projector.fc1.weight".to_string(), vec![c.d_v, d], Projector, Normal),
        ("projector.fc1.bias".to_string(), vec![d], Projector, Zero),
        ("projector.fc2.weight".to_string(), vec![d, d], Projector, Normal),
        ("projector.fc2.bias".to_string(), vec![d], Projector, Zero),
        ("tok_emb".to_string(), vec![c.vocab_size, d], Embedding, Normal),
        ("pos_emb".to_string(), vec![c.positions(), d], Embedding, Normal),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Trunk, One),
            (p("ln1.bias"), vec![d], Trunk, Zero),
            (p("attn.qkv.weight"), vec![d, 3 * d], Trunk, Normal),
            (p("attn.qkv.bias"), vec![3 * d], Trunk, Zero),
            (p("attn.out.weight"), vec![d, d], Trunk, Normal),
            (p("attn.out.bias"), vec![d], Trunk, Zero),
            (p("ln2.gain"), vec![d], Trunk, One),
            (p("ln2.bias"), vec![d], Trunk, Zero),
            (p("ffn.fc1.weight"), vec![d, f], Trunk, Normal),
            (p("ffn.fc1.bias"), vec![f], Trunk, Zero),
            (p("ffn.fc2.weight"), vec![f, d], Trunk, Normal),
            (p("ffn.fc2.bias"), vec![d], Trunk, Zero),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d], Head, One),
        ("ln_f.bias".to_string(), vec![d], Head, Zero),
        ("head.weight".to_string(), vec![d, c.vocab_size], Head, Normal),
        ("head.bias".to_string(), vec![c.vocab_size], Head, Zero),
    ]);
    out
}

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    /// Weights ~ N(0, 0.02^2), biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = tensor_specs(config)
            .into_iter()
            .map(|(name, shape, group, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
                    Init::Zero => vec![T::ZERO; n],
                    Init::One => vec![T::ONE; n],
                };
                Tensor { name, shape, group, data }
            })
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { data: vec![T::ZERO; t.data.len()], ..t.clone_meta() })
                .collect(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.config.n_layers)
    }

    pub fn get(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.tensors[idx].data
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor { data: t.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(), ..t.clone_meta() })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Per-tensor trainable flags selecting the given groups.
    pub fn trainable_mask(&self, groups: &[TensorGroup]) -> Vec<bool> {
        self.tensors.iter().map(|t| groups.contains(&t.group)).collect()
    }
}

impl<T> Tensor<T> {
    fn clone_meta<U>(&self) -> Tensor<U> {
        Tensor { name: self.name.clone(), shape: self.shape.clone(), group: self.group, data: Vec::new() }
    }
}

pub const ALL_GROUPS: [TensorGroup; 4] =
    [TensorGroup::Projector, TensorGroup::Embedding, TensorGroup::Trunk, TensorGroup::Head];

/// Gradients for trainable tensors; frozen tensors have no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros(params: &Params<T>, trainable: &[bool]) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .zip(trainable)
                .map(|(t, &on)| on.then(|| vec![T::ZERO; t.data.len()]))
                .collect(),
        }
    }

    pub fn get(&self, idx: usize) -> Option<&[T]> {
        self.tensors[idx].as_deref()
    }

    pub fn is_tracked(&self, idx: usize) -> bool {
        self.tensors[idx].is_some()
    }

    pub(crate) fn slot(&mut self, idx: usize) -> Option<&mut Vec<T>> {
        self.tensors[idx].as_mut()
    }

    /// `self += other * scale`, tensor by tensor in index order.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y * scale;
                }
            }
        }
    }

    pub fn all_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.iter().all(|&x| x == T::ZERO))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg(d: usize, layers: usize, vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: d,
            n_layers: layers,
            n_heads: 4,
            d_v: 32,
            n_patches: 64,
            max_text_len: 32,
            vocab_size: vocab,
            attention_mode: AttentionMode::Bidirectional,
            vocab_hash: None,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = cfg(64, 2, 148);
        let a = Params::<f32>::init(&c, 5).unwrap();
        let b = Params::<f32>::init(&c, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Params::<f32>::init(&c, 6).unwrap());
        for t in &a.tensors {
            if t.name.ends_with(".bias") {
                assert!(t.data.iter().all(|&x| x == 0.0), "{}", t.name);
            }
            if t.name.ends_with(".gain") {
                assert!(t.data.iter().all(|&x| x == 1.0), "{}", t.name);
            }
        }
        let w = &a.tensors[Layout::TOK_EMB].data;
        let std = (w.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let c = cfg(64, 2, 148);
        // projector 32*64+64+64*64+64 = 6272
        // embeddings 148*64 + 96*64 = 15616
        // block: 128 + (12288+192) + (4096+64) + 128 + (16384+256) + (16384+64) = 49984
        // head: 128 + 9472 + 148 = 9748
        let hand = 6272 + 15616 + 2 * 49984 + 9748;
        assert_eq!(c.param_count(), hand);
        assert_eq!(Params::<f32>::init(&c, 0).unwrap().num_params(), hand);
    }

    #[test]
    fn config_errors() {
        let mut c = cfg(64, 2, 148);
        c.n_heads = 3;
        assert!(matches!(Params::<f32>::init(&c, 0), Err(NetError::Config(_))));
        let mut c = cfg(64, 2, 148);
        c.max_text_len = 16;
        assert!(c.validate().is_err());
    }

    #[test]
    fn layout_agrees_with_names() {
        let p = Params::<f32>::init(&cfg(16, 3, 20), 0).unwrap();
        let l = p.layout();
        assert_eq!(l.len(), p.tensors.len());
        assert_eq!(p.tensors[l.block(2, Layout::FF1_W)].name, "blocks.2.ffn.fc1.weight");
        assert_eq!(p.tensors[l.head_w()].name, "head.weight");
        assert_eq!(p.tensors[Layout::POS_EMB].shape, vec![96, 16]);
    }
}
