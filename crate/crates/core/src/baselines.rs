//! The comparison models: a contrastive dual encoder (shallow interaction,
//! CLIP-style 1:1 assumption) and an early-fusion single-stream transformer
//! over the concatenated text/object sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{pad_images, CandidatePool, FeatureStore, ImageRecord};
use crate::model::layers::{
    encoder_stack_fw, head_fw, masked_mean_rows, object_embed_fw, text_embed_fw,
    EncoderLayerParams, HeadParams, ObjectEmbedParams, ParamBuilder, TextEmbedParams,
};
use crate::model::{rank_with, ModelConfig, ModelError};
use crate::numerics::{ParamBindings, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;

/// CLIP-convention temperature init: logits scale starts at 1/0.07.
pub const LOG_TAU_INIT: f64 = 2.659_260_036_932_778; // ln(1/0.07)
/// The exponentiated temperature is clamped to this range.
pub const TAU_RANGE: (f64, f64) = (1.0, 100.0);

// ── dual encoder ────────────────────────────────────────────────────

struct DualParams {
    text_embed: TextEmbedParams,
    lang: Vec<EncoderLayerParams>,
    obj_embed: ObjectEmbedParams,
    obj: Vec<EncoderLayerParams>,
    text_proj: ParamId,
    obj_proj: ParamId,
    log_tau: ParamId,
}

/// Two independent encoders meeting only at a final cosine similarity.
/// Embeddings are unit-norm; the learnable temperature is stored log-scale.
pub struct DualEncoder<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    params: DualParams,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let (d, d_ff) = (config.d_model, config.d_ff);
        let params = DualParams {
            text_embed: b.text_embed("embed", config.vocab_size, config.max_len, d),
            lang: (0..config.l_lang)
                .map(|i| b.encoder_layer(&format!("lang.{i}"), d, d_ff))
                .collect(),
            obj_embed: b.object_embed("objects", config.d_feat, d),
            obj: (0..config.l_obj)
                .map(|i| b.encoder_layer(&format!("obj.{i}"), d, d_ff))
                .collect(),
            text_proj: b.weight("proj.text.weight", d, config.d_emb),
            obj_proj: b.weight("proj.obj.weight", d, config.d_emb),
            log_tau: b.scalar("temperature.log_tau", LOG_TAU_INIT),
        };
        Ok(Self {
            config: config.clone(),
            store,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// With frozen encoders only the projections and temperature train.
    pub fn trainable_mask(&self, freeze_encoders: bool) -> Vec<bool> {
        self.store
            .iter()
            .map(|(_, p)| {
                !freeze_encoders
                    || p.name.starts_with("proj.")
                    || p.name == "temperature.log_tau"
            })
            .collect()
    }

    /// Unit-norm text embedding: encoder, `[CLS]` pool, projection,
    /// normalize. Returns a `[1, d_emb]` node.
    pub fn embed_text_on_tape(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        tokens: &TokenSequence,
    ) -> Result<Var, ModelError> {
        if tokens.max_len() != self.config.max_len {
            return Err(ModelError::WrongSequenceLength {
                got: tokens.max_len(),
                want: self.config.max_len,
            });
        }
        for &id in &tokens.ids {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        let mask = tokens.mask_bools();
        let x = text_embed_fw(tape, bind, &self.params.text_embed, &tokens.ids)?;
        let h = encoder_stack_fw(tape, bind, &self.params.lang, x, self.config.n_heads, &mask)?;
        let pooled = tape.slice_rows(h, 0, 1)?;
        let projected = tape.matmul(pooled, bind.var(self.params.text_proj))?;
        Ok(tape.l2_normalize_rows(projected)?)
    }

    /// Unit-norm image embedding: object encoder, masked mean pool,
    /// projection, normalize. Returns a `[1, d_emb]` node.
    pub fn embed_image_on_tape(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        boxes: &Tensor<T>,
        feats: &Tensor<T>,
        obj_mask: &[bool],
    ) -> Result<Var, ModelError> {
        let x = object_embed_fw(tape, bind, &self.params.obj_embed, boxes, feats)?;
        let h = encoder_stack_fw(tape, bind, &self.params.obj, x, self.config.n_heads, obj_mask)?;
        let pooled = masked_mean_rows(tape, h, obj_mask)?;
        let projected = tape.matmul(pooled, bind.var(self.params.obj_proj))?;
        Ok(tape.l2_normalize_rows(projected)?)
    }

    /// Precomputable unit image embedding.
    pub fn embed_image(&self, image: &ImageRecord) -> Result<Vec<T>, ModelError> {
        let batch = pad_images::<T>(&[image], self.config.n_obj)?;
        let (boxes, feats, mask) = batch.example(0);
        let mut tape = Tape::new();
        let bind = tape.bind_all(&self.store);
        let e = self.embed_image_on_tape(&mut tape, &bind, &boxes, &feats, &mask)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn embed_text(&self, tokens: &TokenSequence) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let bind = tape.bind_all(&self.store);
        let e = self.embed_text_on_tape(&mut tape, &bind, tokens)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Cosine of the two unit embeddings, in [-1, 1]. Scoring composes the
    /// two standalone embedding paths, so precomputing image embeddings is
    /// bit-identical to end-to-end scoring.
    pub fn score(&self, tokens: &TokenSequence, image: &ImageRecord) -> Result<T, ModelError> {
        let t = self.embed_text(tokens)?;
        let m = self.embed_image(image)?;
        Ok(cosine(&t, &m))
    }

    pub fn rank_pool(
        &self,
        tokens: &TokenSequence,
        pool: &CandidatePool,
        features: &FeatureStore,
    ) -> Result<Vec<(String, T)>, ModelError> {
        rank_with(pool, features, |image| self.score(tokens, image))
    }

    /// Symmetric contrastive loss over a batch of matched (text, image)
    /// pairs: all cross pairs are treated as negatives (the 1:1 assumption).
    pub fn contrastive_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        batch: &[(TokenSequence, Tensor<T>, Tensor<T>, Vec<bool>)],
    ) -> Result<Var, ModelError> {
        if batch.len() < 2 {
            return Err(ModelError::BatchTooSmall(batch.len()));
        }
        let mut text_rows = Vec::with_capacity(batch.len());
        let mut image_rows = Vec::with_capacity(batch.len());
        for (tokens, boxes, feats, mask) in batch {
            text_rows.push(self.embed_text_on_tape(tape, bind, tokens)?);
            image_rows.push(self.embed_image_on_tape(tape, bind, boxes, feats, mask)?);
        }
        let texts = tape.concat_rows(&text_rows)?;
        let images = tape.concat_rows(&image_rows)?;
        let images_t = tape.transpose(images);
        let cosines = tape.matmul(texts, images_t)?;
        let tau = tape.exp(bind.var(self.params.log_tau));
        let tau = tape.clamp(tau, T::cast(TAU_RANGE.0), T::cast(TAU_RANGE.1));
        let logits = tape.scalar_mul(cosines, tau)?;
        Ok(symmetric_cross_entropy(tape, logits)?)
    }
}

/// Mean of row-wise and column-wise cross-entropy against the diagonal of
/// an `n x n` logit matrix.
pub fn symmetric_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
) -> Result<Var, crate::numerics::NumericsError> {
    let n = tape.value(logits).rows();
    let targets: Vec<usize> = (0..n).collect();
    let fwd = tape.softmax_cross_entropy(logits, &targets)?;
    let logits_t = tape.transpose(logits);
    let bwd = tape.softmax_cross_entropy(logits_t, &targets)?;
    let sum = tape.add(fwd, bwd)?;
    Ok(tape.scale(sum, T::cast(0.5)))
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

// ── early fusion ────────────────────────────────────────────────────

struct EarlyParams {
    text_embed: TextEmbedParams,
    obj_embed: ObjectEmbedParams,
    cls: ParamId,
    seg_text: ParamId,
    seg_obj: ParamId,
    stack: Vec<EncoderLayerParams>,
    head: HeadParams,
}

/// Single transformer stack over `[CLS] + text tokens + projected objects`
/// with a learned modality-segment embedding per position and the same
/// five-stage head. Objects carry no positional term here either.
pub struct EarlyFusionMatcher<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    params: EarlyParams,
}

impl<T: Scalar> EarlyFusionMatcher<T> {
    /// Stack depth matches the mid-fusion text path (language + cross
    /// layers) so the comparison is about where fusion happens, not size.
    pub fn depth(config: &ModelConfig) -> usize {
        config.l_lang + config.l_cross
    }

    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let (d, d_ff) = (config.d_model, config.d_ff);
        let params = EarlyParams {
            text_embed: b.text_embed("embed", config.vocab_size, config.max_len, d),
            obj_embed: b.object_embed("objects", config.d_feat, d),
            cls: b.weight("fusion.cls", 1, d),
            seg_text: b.vector_weight("fusion.seg_text", d),
            seg_obj: b.vector_weight("fusion.seg_obj", d),
            stack: (0..Self::depth(config))
                .map(|i| b.encoder_layer(&format!("stack.{i}"), d, d_ff))
                .collect(),
            head: b.head("head", d),
        };
        Ok(Self {
            config: config.clone(),
            store,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn trainable_mask(&self, freeze_encoders: bool) -> Vec<bool> {
        self.store
            .iter()
            .map(|(_, p)| !freeze_encoders || p.name.starts_with("head."))
            .collect()
    }

    /// Probability node over the fused sequence; length is
    /// `1 + max_len + n_obj`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        tokens: &TokenSequence,
        boxes: &Tensor<T>,
        feats: &Tensor<T>,
        obj_mask: &[bool],
    ) -> Result<Var, ModelError> {
        if tokens.max_len() != self.config.max_len {
            return Err(ModelError::WrongSequenceLength {
                got: tokens.max_len(),
                want: self.config.max_len,
            });
        }
        for &id in &tokens.ids {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        let text = text_embed_fw(tape, bind, &self.params.text_embed, &tokens.ids)?;
        let text = tape.add_bias(text, bind.var(self.params.seg_text))?;
        let obj = object_embed_fw(tape, bind, &self.params.obj_embed, boxes, feats)?;
        let obj = tape.add_bias(obj, bind.var(self.params.seg_obj))?;
        let cls = bind.var(self.params.cls);
        let cls = tape.add_bias(cls, bind.var(self.params.seg_text))?;
        let seq = tape.concat_rows(&[cls, text, obj])?;

        let mut mask = Vec::with_capacity(1 + tokens.max_len() + obj_mask.len());
        mask.push(true);
        mask.extend(tokens.mask_bools());
        mask.extend_from_slice(obj_mask);

        let h = encoder_stack_fw(
            tape,
            bind,
            &self.params.stack,
            seq,
            self.config.n_heads,
            &mask,
        )?;
        let pooled = tape.slice_rows(h, 0, 1)?;
        Ok(head_fw(tape, bind, &self.params.head, pooled)?)
    }

    pub fn score(&self, tokens: &TokenSequence, image: &ImageRecord) -> Result<T, ModelError> {
        let batch = pad_images::<T>(&[image], self.config.n_obj)?;
        let (boxes, feats, mask) = batch.example(0);
        let mut tape = Tape::new();
        let bind = tape.bind_all(&self.store);
        let p = self.forward_on_tape(&mut tape, &bind, tokens, &boxes, &feats, &mask)?;
        Ok(tape.value(p).item())
    }

    pub fn rank_pool(
        &self,
        tokens: &TokenSequence,
        pool: &CandidatePool,
        features: &FeatureStore,
    ) -> Result<Vec<(String, T)>, ModelError> {
        rank_with(pool, features, |image| self.score(tokens, image))
    }
}
