//! Forward passes: window-level language modeling for pretraining and
//! whole-piece classification through the learnable end-of-sequence token.
//!
//! Classification is split into a prefix pass and a token pass. Under
//! causal masking the piece's own positions never attend to the
//! classification token, so their per-layer keys/values are computed once
//! (without a graph — the body is frozen during fine-tuning) and the
//! trainable token row attends over that cached context. This keeps the
//! fine-tuning graph at a few rows per piece instead of the whole piece.

use std::sync::Arc;

use super::{EncoderKind, GptModel, LongInputPolicy, ModelError, LN_EPS};
use crate::bootleg::{tokenize_emb, BootlegScore, Column, STAFF_POSITIONS};
use crate::rng::{self, Rng};
use crate::tensor::ops::{
    add, add_bias, causal_self_attention, context_attention, conv1d_causal, dropout_mask,
    embedding_lookup, gelu, layer_norm, matmul, scale, sigmoid_bce_mean, slice_cols, slice_rows,
    softmax_xent_mean,
};
use crate::tensor::{Scalar, Tensor};

/// One pretraining window: raw byte tokens for the EMB encoder, bootleg
/// columns for FC/CNN.
#[derive(Debug, Clone, Copy)]
pub enum WindowTokens<'a> {
    Bytes(&'a [u8]),
    Columns(&'a [Column]),
}

impl WindowTokens<'_> {
    pub fn len(&self) -> usize {
        match self {
            WindowTokens::Bytes(b) => b.len(),
            WindowTokens::Columns(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            WindowTokens::Bytes(_) => "byte tokens",
            WindowTokens::Columns(_) => "columns",
        }
    }
}

/// Embedded input sequence with positions added, plus a flag set when the
/// long-input policy had to drop positions.
pub struct EncodedInput<T: Scalar> {
    pub seq: Tensor<T>,
    pub truncated: bool,
}

/// Per-layer keys/values of a piece's positions, reusable across training
/// steps while the body is frozen. Cloning shares the buffers.
#[derive(Clone)]
pub struct PieceCache<T: Scalar> {
    pub ctx_len: usize,
    pub truncated: bool,
    layers: Vec<(Arc<Vec<T>>, Arc<Vec<T>>)>,
}

pub struct ClassifyOutput<T: Scalar> {
    /// K-1 ordinal logits of the requested head.
    pub logits: Tensor<T>,
    /// Projection-layer output; the vector used for zero-shot ranking.
    pub embedding: Tensor<T>,
    pub truncated: bool,
}

struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl<'a> Dropout<'a> {
    fn off() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    fn apply<T: Scalar>(&mut self, t: Tensor<T>) -> Tensor<T> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return t;
        };
        if self.rate <= 0.0 {
            return t;
        }
        let keep = 1.0 - self.rate;
        let inv = T::from_f64(1.0 / keep);
        let mask: Vec<T> = (0..t.len())
            .map(|_| {
                if rng::uniform_f64(rng) < keep {
                    inv
                } else {
                    T::ZERO
                }
            })
            .collect();
        dropout_mask(&t, mask)
    }
}

fn columns_matrix<T: Scalar>(cols: &[Column]) -> Tensor<T> {
    let mut data = vec![T::ZERO; cols.len() * STAFF_POSITIONS];
    for (r, col) in cols.iter().enumerate() {
        for j in 0..STAFF_POSITIONS {
            if col.get(j) {
                data[r * STAFF_POSITIONS + j] = T::ONE;
            }
        }
    }
    Tensor::new(vec![cols.len(), STAFF_POSITIONS], data)
}

fn columns_bits<T: Scalar>(cols: &[Column]) -> Vec<T> {
    let mut data = vec![T::ZERO; cols.len() * STAFF_POSITIONS];
    for (r, col) in cols.iter().enumerate() {
        for j in 0..STAFF_POSITIONS {
            if col.get(j) {
                data[r * STAFF_POSITIONS + j] = T::ONE;
            }
        }
    }
    data
}

impl<T: Scalar> GptModel<T> {
    fn ln(&self, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>, ModelError> {
        Ok(layer_norm(
            x,
            self.param(&format!("{prefix}.g")),
            self.param(&format!("{prefix}.b")),
            T::from_f64(LN_EPS),
        )?)
    }

    fn linear(&self, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>, ModelError> {
        Ok(add_bias(
            &matmul(x, self.param(&format!("{prefix}.w")))?,
            self.param(&format!("{prefix}.b")),
        )?)
    }

    /// One pre-norm block with the attention step supplied by the caller.
    fn block_with<F>(
        &self,
        i: usize,
        x: Tensor<T>,
        drop: &mut Dropout,
        attend: F,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), ModelError>
    where
        F: FnOnce(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Result<Tensor<T>, ModelError>,
    {
        let d = self.config.d_model;
        let h = self.ln(&x, &format!("h{i}.ln1"))?;
        let qkv = self.linear(&h, &format!("h{i}.attn.qkv"))?;
        let q = slice_cols(&qkv, 0, d)?;
        let k = slice_cols(&qkv, d, d)?;
        let v = slice_cols(&qkv, 2 * d, d)?;
        let a = attend(&q, &k, &v)?;
        let a = drop.apply(self.linear(&a, &format!("h{i}.attn.proj"))?);
        let x = add(&x, &a)?;
        let h2 = self.ln(&x, &format!("h{i}.ln2"))?;
        let m = gelu(&self.linear(&h2, &format!("h{i}.mlp.fc"))?);
        let m = drop.apply(self.linear(&m, &format!("h{i}.mlp.proj"))?);
        Ok((add(&x, &m)?, k, v))
    }

    fn block_causal(
        &self,
        i: usize,
        x: Tensor<T>,
        drop: &mut Dropout,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), ModelError> {
        let heads = self.config.n_heads;
        self.block_with(i, x, drop, |q, k, v| {
            Ok(causal_self_attention(q, k, v, heads)?)
        })
    }

    fn embed_window(&self, window: &WindowTokens) -> Result<Tensor<T>, ModelError> {
        match (self.config.encoder, window) {
            (EncoderKind::Emb, WindowTokens::Bytes(bytes)) => {
                let ids: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
                Ok(embedding_lookup(self.param("tok_emb"), &ids)?)
            }
            (EncoderKind::Fc, WindowTokens::Columns(cols)) => {
                let x = columns_matrix::<T>(cols);
                self.linear(&x, "enc")
            }
            (EncoderKind::Cnn, WindowTokens::Columns(cols)) => {
                let x = columns_matrix::<T>(cols);
                Ok(conv1d_causal(
                    &x,
                    self.param("enc.kernel"),
                    self.param("enc.b"),
                )?)
            }
            (expected, w) => Err(ModelError::WindowKindMismatch {
                expected,
                found: w.kind(),
            }),
        }
    }

    /// Positional rows for a sequence of length `l`. Within the table the
    /// rows are taken as-is (and stay differentiable); beyond it the table
    /// is linearly interpolated to `l` rows, which only happens on frozen
    /// bodies.
    fn positions(&self, l: usize) -> Result<Tensor<T>, ModelError> {
        let table = self.param("pos_emb");
        let p = self.config.context_len;
        if l <= p {
            return Ok(slice_rows(table, 0, l)?);
        }
        let d = self.config.d_model;
        let mut data = vec![T::ZERO; l * d];
        for i in 0..l {
            let x = i as f64 * (p - 1) as f64 / (l - 1) as f64;
            let lo = (x.floor() as usize).min(p - 2);
            let frac = T::from_f64(x - lo as f64);
            let one_m = T::ONE - frac;
            let row_lo = &table.data()[lo * d..(lo + 1) * d];
            let row_hi = &table.data()[(lo + 1) * d..(lo + 2) * d];
            for j in 0..d {
                data[i * d + j] = one_m * row_lo[j] + frac * row_hi[j];
            }
        }
        Ok(Tensor::new(vec![l, d], data))
    }

    fn lm_logits_inner(
        &self,
        window: &WindowTokens,
        drop: &mut Dropout,
    ) -> Result<Tensor<T>, ModelError> {
        let l = window.len();
        if l == 0 {
            return Err(ModelError::EmptyScore);
        }
        if l > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                len: l,
                context: self.config.context_len,
            });
        }
        let emb = self.embed_window(window)?;
        let pos = self.positions(l)?;
        let mut x = drop.apply(add(&emb, &pos)?);
        for i in 0..self.config.n_layers {
            let (next, _, _) = self.block_causal(i, x, drop)?;
            x = next;
        }
        let x = self.ln(&x, "ln_f")?;
        self.linear(&x, "lm_head")
    }

    /// Per-position language-model logits of a window, dropout disabled.
    pub fn lm_logits(&self, window: &WindowTokens) -> Result<Tensor<T>, ModelError> {
        self.lm_logits_inner(window, &mut Dropout::off())
    }

    /// Mean language-model loss over a batch of windows: next-token NLL for
    /// the EMB encoder, next-column multi-hot BCE for FC/CNN. Windows must
    /// fit the context and carry at least two positions.
    pub fn forward_lm(
        &self,
        batch: &[WindowTokens],
        mut rng: Option<&mut Rng>,
    ) -> Result<Tensor<T>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyScore);
        }
        let mut total: Option<Tensor<T>> = None;
        for window in batch {
            let l = window.len();
            if l < 2 {
                return Err(ModelError::BadConfig(
                    "language-model windows need at least 2 positions".into(),
                ));
            }
            let mut drop = Dropout {
                rate: self.config.dropout,
                rng: rng.as_deref_mut(),
            };
            let logits = self.lm_logits_inner(window, &mut drop)?;
            let pred = slice_rows(&logits, 0, l - 1)?;
            let loss = match window {
                WindowTokens::Bytes(bytes) => {
                    let targets: Vec<usize> = bytes[1..].iter().map(|&b| b as usize).collect();
                    softmax_xent_mean(&pred, &targets)?
                }
                WindowTokens::Columns(cols) => {
                    let targets = columns_bits::<T>(&cols[1..]);
                    sigmoid_bce_mean(&pred, &targets)?
                }
            };
            total = Some(match total {
                None => loss,
                Some(acc) => add(&acc, &loss)?,
            });
        }
        let total = total.unwrap();
        Ok(scale(&total, T::ONE / T::from_usize(batch.len())))
    }

    /// Whole-piece token/column view after the long-input policy, plus the
    /// truncation flag.
    fn whole_piece_window<'s>(
        &self,
        score: &'s BootlegScore,
        byte_buf: &'s mut Vec<u8>,
    ) -> (WindowTokens<'s>, bool) {
        let per_col = self.config.encoder.positions_per_column();
        let l_raw = score.width() * per_col;
        let ctx = self.config.context_len;
        let cap = self.config.max_finetune_len;
        let l_used = if l_raw <= ctx {
            l_raw
        } else {
            match self.config.long_input_policy {
                LongInputPolicy::Truncate => ctx,
                // Chunked classification never routes long pieces through
                // here, so treat a stray long input like interpolation.
                LongInputPolicy::Interpolate | LongInputPolicy::ChunkMean => l_raw.min(cap),
            }
        };
        let truncated = l_used < l_raw;
        let cols_used = l_used / per_col;
        match self.config.encoder {
            EncoderKind::Emb => {
                *byte_buf = tokenize_emb(score).tokens;
                byte_buf.truncate(cols_used * per_col);
                (WindowTokens::Bytes(byte_buf.as_slice()), truncated)
            }
            EncoderKind::Fc | EncoderKind::Cnn => {
                (WindowTokens::Columns(&score.columns()[..cols_used]), truncated)
            }
        }
    }

    /// Embeds a whole piece (positions added) for classification. Sequence
    /// length is exactly 8w for EMB and w for FC/CNN, before any long-input
    /// policy and before the classification token.
    pub fn encode_input(&self, score: &BootlegScore) -> Result<EncodedInput<T>, ModelError> {
        if score.width() == 0 {
            return Err(ModelError::EmptyScore);
        }
        let mut bytes = Vec::new();
        let (window, truncated) = self.whole_piece_window(score, &mut bytes);
        let l = window.len();
        let emb = self.embed_window(&window)?;
        let pos = self.positions(l)?;
        Ok(EncodedInput {
            seq: add(&emb, &pos)?,
            truncated,
        })
    }

    /// Runs the body over a piece's positions and caches per-layer
    /// keys/values for the classification-token pass. An empty piece yields
    /// an empty context: the token will attend only to itself.
    pub fn piece_cache(&self, score: &BootlegScore) -> Result<PieceCache<T>, ModelError> {
        let n_layers = self.config.n_layers;
        if score.width() == 0 {
            return Ok(PieceCache {
                ctx_len: 0,
                truncated: false,
                layers: vec![(Arc::new(Vec::new()), Arc::new(Vec::new())); n_layers],
            });
        }
        let encoded = self.encode_input(score)?;
        let ctx_len = encoded.seq.shape()[0];
        let mut x = encoded.seq;
        let mut drop = Dropout::off();
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (next, k, v) = self.block_causal(i, x, &mut drop)?;
            layers.push((Arc::new(k.data().to_vec()), Arc::new(v.data().to_vec())));
            x = next;
        }
        Ok(PieceCache {
            ctx_len,
            truncated: encoded.truncated,
            layers,
        })
    }

    /// Classification-token pass over a cached context: the token row runs
    /// through every block attending to the cached keys/values plus itself,
    /// then through the final norm and the projection layer.
    pub fn cls_embedding(&self, cache: &PieceCache<T>) -> Result<Tensor<T>, ModelError> {
        let heads = self.config.n_heads;
        let mut x = self.param("cls.token").clone();
        let mut drop = Dropout::off();
        for i in 0..self.config.n_layers {
            let (ctx_k, ctx_v) = &cache.layers[i];
            let (ctx_k, ctx_v) = (Arc::clone(ctx_k), Arc::clone(ctx_v));
            let ctx_len = cache.ctx_len;
            let (next, _, _) = self.block_with(i, x, &mut drop, move |q, k, v| {
                Ok(context_attention(q, k, v, ctx_k, ctx_v, ctx_len, heads)?)
            })?;
            x = next;
        }
        let x = self.ln(&x, "ln_f")?;
        Ok(gelu(&self.linear(&x, "proj")?))
    }

    /// Ordinal logits of `dataset_id`'s head for a projection embedding.
    pub fn head_logits(
        &self,
        embedding: &Tensor<T>,
        dataset_id: &str,
    ) -> Result<Tensor<T>, ModelError> {
        if self.head_spec(dataset_id).is_none() {
            return Err(ModelError::UnknownHead(dataset_id.to_owned()));
        }
        self.linear(embedding, &format!("head.{dataset_id}"))
    }

    /// Classification through an existing cache.
    pub fn classify_with_cache(
        &self,
        cache: &PieceCache<T>,
        dataset_id: &str,
    ) -> Result<ClassifyOutput<T>, ModelError> {
        let embedding = self.cls_embedding(cache)?;
        let logits = self.head_logits(&embedding, dataset_id)?;
        Ok(ClassifyOutput {
            logits,
            embedding,
            truncated: cache.truncated,
        })
    }

    /// Full classification of a piece: ordinal logits and the projection
    /// embedding. Deterministic: dropout is never active on this path.
    pub fn forward_classify(
        &self,
        score: &BootlegScore,
        dataset_id: &str,
    ) -> Result<ClassifyOutput<T>, ModelError> {
        let per_col = self.config.encoder.positions_per_column();
        let l_raw = score.width() * per_col;
        if self.config.long_input_policy == LongInputPolicy::ChunkMean
            && l_raw > self.config.context_len
        {
            return self.classify_chunked(score, dataset_id);
        }
        let cache = self.piece_cache(score)?;
        self.classify_with_cache(&cache, dataset_id)
    }

    /// Long-piece fallback: classify fixed-size column chunks and average
    /// their embeddings, then apply the head once to the mean.
    fn classify_chunked(
        &self,
        score: &BootlegScore,
        dataset_id: &str,
    ) -> Result<ClassifyOutput<T>, ModelError> {
        let per_col = self.config.encoder.positions_per_column();
        let cols_per_chunk = (self.config.context_len / per_col).max(1);
        let mut embeddings = Vec::new();
        for chunk in score.columns().chunks(cols_per_chunk) {
            let piece = BootlegScore::new(score.piece_id.clone(), chunk.to_vec());
            let cache = self.piece_cache(&piece)?;
            embeddings.push(self.cls_embedding(&cache)?);
        }
        let n = embeddings.len();
        let mut acc = embeddings.pop().unwrap();
        for e in &embeddings {
            acc = add(&acc, e)?;
        }
        let embedding = scale(&acc, T::ONE / T::from_usize(n));
        let logits = self.head_logits(&embedding, dataset_id)?;
        Ok(ClassifyOutput {
            logits,
            embedding,
            truncated: false,
        })
    }
}
