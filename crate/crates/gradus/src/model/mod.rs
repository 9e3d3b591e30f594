//! Decoder-only transformer with pluggable input encoders, language-model
//! heads for pretraining and an ordinal multi-task classification tail.
//!
//! The block layout is pre-norm GPT-2 style: LN → multi-head causal
//! attention → residual, LN → 4x MLP with GELU → residual, final LN.
//! Downstream classification appends a learnable token at the end of the
//! sequence (under causal masking an end token is the only position that
//! sees the whole piece), projects its final hidden state through
//! linear + GELU, and feeds that embedding to one K-1-wide ordinal head
//! per dataset.

pub mod checkpoint;
mod forward;
pub mod ordinal;

pub use forward::{ClassifyOutput, EncodedInput, PieceCache, WindowTokens};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootleg::{BYTES_PER_COLUMN, BYTE_VOCAB, STAFF_POSITIONS};
use crate::rng;
use crate::tensor::optim::{NamedGrads, ParamSet};
use crate::tensor::{GradMap, Scalar, Tensor};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-5;
/// Standard deviation of normal parameter init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("ordinal head for `{0}` needs at least 2 classes, got {1}")]
    TooFewClasses(String, usize),
    #[error("duplicate dataset id `{0}`")]
    DuplicateHead(String),
    #[error("no head for dataset `{0}`")]
    UnknownHead(String),
    #[error("class {class} out of range for {k} classes")]
    ClassOutOfRange { class: usize, k: usize },
    #[error("empty score cannot be encoded for language modeling")]
    EmptyScore,
    #[error("window of {len} positions exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("{expected:?} encoder expected, window carries {found}")]
    WindowKindMismatch { expected: EncoderKind, found: &'static str },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Byte-group tokens through a categorical embedding table; sequence
    /// length 8w.
    Emb,
    /// Per-column linear map of the 62-dim multi-hot; sequence length w.
    Fc,
    /// Causal 1-D convolution over columns; sequence length w.
    Cnn,
}

impl EncoderKind {
    /// Width of the language-model head: next-byte distribution for EMB,
    /// next-column multi-hot for FC/CNN.
    pub fn lm_width(self) -> usize {
        match self {
            EncoderKind::Emb => BYTE_VOCAB,
            EncoderKind::Fc | EncoderKind::Cnn => STAFF_POSITIONS,
        }
    }

    /// Encoded positions per bootleg column.
    pub fn positions_per_column(self) -> usize {
        match self {
            EncoderKind::Emb => BYTES_PER_COLUMN,
            EncoderKind::Fc | EncoderKind::Cnn => 1,
        }
    }
}

/// What to do with fine-tuning inputs longer than the pretraining window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongInputPolicy {
    /// Linearly interpolate the positional table to the input length.
    Interpolate,
    /// Keep the first `context_len` positions and set the truncation flag.
    Truncate,
    /// Split into windows, classify each, and average the embeddings.
    ChunkMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum pretraining positions; also the positional table size.
    pub context_len: usize,
    pub encoder: EncoderKind,
    pub cnn_kernel: usize,
    pub dropout: f64,
    /// Position cap for fine-tuning inputs.
    pub max_finetune_len: usize,
    pub long_input_policy: LongInputPolicy,
}

impl GptConfig {
    /// Desk-scale preset: trains in minutes on a CPU.
    pub fn desk(encoder: EncoderKind) -> Self {
        GptConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 128,
            encoder,
            cnn_kernel: 5,
            dropout: 0.1,
            max_finetune_len: 2048,
            long_input_policy: LongInputPolicy::Interpolate,
        }
    }

    /// Full-scale preset: 768-dim hidden states, 256-token windows.
    pub fn paper(encoder: EncoderKind) -> Self {
        GptConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            context_len: 256,
            encoder,
            cnn_kernel: 5,
            dropout: 0.1,
            max_finetune_len: 2048,
            long_input_policy: LongInputPolicy::Interpolate,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ModelError::BadConfig(
                "d_model, n_layers and n_heads must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 {
            return Err(ModelError::BadConfig("context_len must be >= 2".into()));
        }
        if self.cnn_kernel < 1 {
            return Err(ModelError::BadConfig("cnn_kernel must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig("dropout must be in [0, 1)".into()));
        }
        if self.max_finetune_len < self.context_len {
            return Err(ModelError::BadConfig(
                "max_finetune_len must be >= context_len".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dataset_id: String,
    pub num_classes: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn body_param_shapes(config: &GptConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut out = Vec::new();
    match config.encoder {
        EncoderKind::Emb => out.push(("tok_emb".into(), vec![BYTE_VOCAB, d], Init::Normal)),
        EncoderKind::Fc => {
            out.push(("enc.w".into(), vec![STAFF_POSITIONS, d], Init::Normal));
            out.push(("enc.b".into(), vec![d], Init::Zeros));
        }
        EncoderKind::Cnn => {
            out.push((
                "enc.kernel".into(),
                vec![config.cnn_kernel, STAFF_POSITIONS, d],
                Init::Normal,
            ));
            out.push(("enc.b".into(), vec![d], Init::Zeros));
        }
    }
    out.push(("pos_emb".into(), vec![config.context_len, d], Init::Normal));
    for i in 0..config.n_layers {
        out.push((format!("h{i}.ln1.g"), vec![d], Init::Ones));
        out.push((format!("h{i}.ln1.b"), vec![d], Init::Zeros));
        out.push((format!("h{i}.attn.qkv.w"), vec![d, 3 * d], Init::Normal));
        out.push((format!("h{i}.attn.qkv.b"), vec![3 * d], Init::Zeros));
        out.push((format!("h{i}.attn.proj.w"), vec![d, d], Init::Normal));
        out.push((format!("h{i}.attn.proj.b"), vec![d], Init::Zeros));
        out.push((format!("h{i}.ln2.g"), vec![d], Init::Ones));
        out.push((format!("h{i}.ln2.b"), vec![d], Init::Zeros));
        out.push((format!("h{i}.mlp.fc.w"), vec![d, 4 * d], Init::Normal));
        out.push((format!("h{i}.mlp.fc.b"), vec![4 * d], Init::Zeros));
        out.push((format!("h{i}.mlp.proj.w"), vec![4 * d, d], Init::Normal));
        out.push((format!("h{i}.mlp.proj.b"), vec![d], Init::Zeros));
    }
    out.push(("ln_f.g".into(), vec![d], Init::Ones));
    out.push(("ln_f.b".into(), vec![d], Init::Zeros));
    out.push(("lm_head.w".into(), vec![d, config.encoder.lm_width()], Init::Normal));
    out.push(("lm_head.b".into(), vec![config.encoder.lm_width()], Init::Zeros));
    out.push(("cls.token".into(), vec![1, d], Init::Normal));
    out.push(("proj.w".into(), vec![d, d], Init::Normal));
    out.push(("proj.b".into(), vec![d], Init::Zeros));
    out
}

fn head_param_shapes(d_model: usize, spec: &HeadSpec) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (
            format!("head.{}.w", spec.dataset_id),
            vec![d_model, spec.num_classes - 1],
            Init::Normal,
        ),
        (
            format!("head.{}.b", spec.dataset_id),
            vec![spec.num_classes - 1],
            Init::Zeros,
        ),
    ]
}

pub(crate) fn expected_param_shapes(
    config: &GptConfig,
    heads: &[HeadSpec],
) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = body_param_shapes(config)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    for spec in heads {
        out.extend(
            head_param_shapes(config.d_model, spec)
                .into_iter()
                .map(|(n, s, _)| (n, s)),
        );
    }
    out
}

fn init_params<T: Scalar>(
    rng: &mut rng::Rng,
    shapes: Vec<(String, Vec<usize>, Init)>,
    params: &mut ParamSet<T>,
) {
    for (name, shape, init) in shapes {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Normal => (0..n)
                .map(|_| T::from_f64(rng::standard_normal(rng) * INIT_STD))
                .collect(),
            Init::Zeros => vec![T::ZERO; n],
            Init::Ones => vec![T::ONE; n],
        };
        params.insert(name, Tensor::param(shape, data));
    }
}

/// The named parameter store plus the knowledge of which parameters form
/// the fine-tuning tail. Cloning shares the parameter buffers.
pub struct GptModel<T: Scalar = f32> {
    pub config: GptConfig,
    heads: Vec<HeadSpec>,
    params: ParamSet<T>,
    body_frozen: bool,
}

impl<T: Scalar> Clone for GptModel<T> {
    fn clone(&self) -> Self {
        GptModel {
            config: self.config.clone(),
            heads: self.heads.clone(),
            params: self.params.clone(),
            body_frozen: self.body_frozen,
        }
    }
}

impl<T: Scalar> GptModel<T> {
    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn head_spec(&self, dataset_id: &str) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.dataset_id == dataset_id)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub(crate) fn from_parts(
        config: GptConfig,
        heads: Vec<HeadSpec>,
        params: ParamSet<T>,
    ) -> Self {
        GptModel {
            config,
            heads,
            params,
            body_frozen: false,
        }
    }

    pub(crate) fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from model"))
    }

    /// Adds freshly initialized ordinal heads for the given datasets.
    pub fn add_heads(&mut self, specs: &[HeadSpec], seed: u64) -> Result<(), ModelError> {
        validate_head_specs(specs)?;
        for spec in specs {
            if self.head_spec(&spec.dataset_id).is_some() {
                return Err(ModelError::DuplicateHead(spec.dataset_id.clone()));
            }
        }
        let mut rng = rng::derive(seed, 0x4EAD);
        for spec in specs {
            init_params(
                &mut rng,
                head_param_shapes(self.config.d_model, spec),
                &mut self.params,
            );
            self.heads.push(spec.clone());
        }
        Ok(())
    }

    /// True for the parameters trained during fine-tuning: the
    /// classification token, the projection layer and every ordinal head.
    pub fn is_tail_param(name: &str) -> bool {
        name == "cls.token" || name.starts_with("proj.") || name.starts_with("head.")
    }

    /// Freezes everything outside the classification tail.
    pub fn freeze_body(&mut self) {
        let names: Vec<String> = self.params.keys().cloned().collect();
        for name in names {
            let frozen = !Self::is_tail_param(&name);
            let t = self.params.get(&name).unwrap();
            if t.requires_grad() == frozen {
                let replaced = t.with_requires_grad(!frozen);
                self.params.insert(name, replaced);
            }
        }
        self.body_frozen = true;
    }

    pub fn body_frozen(&self) -> bool {
        self.body_frozen
    }

    /// Pulls this model's parameter gradients out of a gradient map.
    pub fn named_grads(&self, mut grads: GradMap<T>) -> NamedGrads<T> {
        let mut out = NamedGrads::new();
        for (name, tensor) in &self.params {
            if let Some(g) = grads.take(tensor.id()) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    /// Cheap parameter snapshot; buffers are shared, never copied.
    pub fn snapshot(&self) -> ParamSet<T> {
        self.params.clone()
    }

    pub fn restore(&mut self, snapshot: ParamSet<T>) {
        self.params = snapshot;
    }
}

fn validate_head_specs(specs: &[HeadSpec]) -> Result<(), ModelError> {
    let mut seen = BTreeMap::new();
    for spec in specs {
        if spec.num_classes < 2 {
            return Err(ModelError::TooFewClasses(
                spec.dataset_id.clone(),
                spec.num_classes,
            ));
        }
        if seen.insert(spec.dataset_id.clone(), ()).is_some() {
            return Err(ModelError::DuplicateHead(spec.dataset_id.clone()));
        }
    }
    Ok(())
}

/// Builds a model with normal(0, 0.02) weights, zero biases and unit norm
/// gains, deterministically for (config, head_specs, seed).
pub fn build_model<T: Scalar>(
    config: GptConfig,
    head_specs: &[HeadSpec],
    seed: u64,
) -> Result<GptModel<T>, ModelError> {
    config.validate()?;
    validate_head_specs(head_specs)?;
    let mut rng = rng::derive(seed, 0xB0D1);
    let mut params = ParamSet::new();
    init_params(&mut rng, body_param_shapes(&config), &mut params);
    for spec in head_specs {
        init_params(&mut rng, head_param_shapes(config.d_model, spec), &mut params);
    }
    Ok(GptModel {
        config,
        heads: head_specs.to_vec(),
        params,
        body_frozen: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_fc() -> GptConfig {
        let mut c = GptConfig::desk(EncoderKind::Fc);
        c.d_model = 32;
        c.n_layers = 2;
        c.n_heads = 2;
        c.context_len = 16;
        c.max_finetune_len = 64;
        c
    }

    #[test]
    fn single_head_k9_has_width_8() {
        let m: GptModel<f32> = build_model(
            desk_fc(),
            &[HeadSpec {
                dataset_id: "cipi".into(),
                num_classes: 9,
            }],
            1,
        )
        .unwrap();
        assert_eq!(m.param("head.cipi.w").shape(), &[32, 8]);
        assert_eq!(m.param("head.cipi.b").shape(), &[8]);
    }

    #[test]
    fn three_heads_widths_follow_class_counts() {
        let specs = [("a", 9), ("b", 9), ("c", 5)].map(|(id, k)| HeadSpec {
            dataset_id: id.into(),
            num_classes: k,
        });
        let m: GptModel<f32> = build_model(desk_fc(), &specs, 1).unwrap();
        assert_eq!(m.param("head.a.w").shape(), &[32, 8]);
        assert_eq!(m.param("head.b.w").shape(), &[32, 8]);
        assert_eq!(m.param("head.c.w").shape(), &[32, 4]);
    }

    #[test]
    fn k1_head_is_a_contract_error() {
        let err = build_model::<f32>(
            desk_fc(),
            &[HeadSpec {
                dataset_id: "x".into(),
                num_classes: 1,
            }],
            1,
        );
        assert!(matches!(err, Err(ModelError::TooFewClasses(_, 1))));
    }

    #[test]
    fn duplicate_dataset_id_rejected() {
        let specs = [("a", 3), ("a", 4)].map(|(id, k)| HeadSpec {
            dataset_id: id.into(),
            num_classes: k,
        });
        assert!(matches!(
            build_model::<f32>(desk_fc(), &specs, 1),
            Err(ModelError::DuplicateHead(_))
        ));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: GptModel<f32> = build_model(desk_fc(), &[], 7).unwrap();
        let b: GptModel<f32> = build_model(desk_fc(), &[], 7).unwrap();
        for (name, t) in a.params() {
            assert_eq!(t.data(), b.param(name).data(), "param {name} differs");
        }
        let c: GptModel<f32> = build_model(desk_fc(), &[], 8).unwrap();
        assert_ne!(a.param("proj.w").data(), c.param("proj.w").data());
    }

    #[test]
    fn freeze_body_keeps_only_the_tail_trainable() {
        let mut m: GptModel<f32> = build_model(
            desk_fc(),
            &[HeadSpec {
                dataset_id: "d".into(),
                num_classes: 3,
            }],
            2,
        )
        .unwrap();
        m.freeze_body();
        for (name, t) in m.params() {
            assert_eq!(
                t.requires_grad(),
                GptModel::<f32>::is_tail_param(name),
                "{name}"
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = desk_fc();
        c.n_heads = 5; // 32 % 5 != 0
        assert!(matches!(
            build_model::<f32>(c, &[], 1),
            Err(ModelError::BadConfig(_))
        ));
        let mut c = desk_fc();
        c.context_len = 1;
        assert!(matches!(
            build_model::<f32>(c, &[], 1),
            Err(ModelError::BadConfig(_))
        ));
    }
}
