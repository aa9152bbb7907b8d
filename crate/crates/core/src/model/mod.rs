//! The mid-fusion matcher: word/position and object embeddings, a language
//! encoder and an object-relationship encoder (no positional term on
//! objects), a cross-modal encoder with bidirectional cross-attention, and
//! a five-stage classification head producing the relevance R(k, m).

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pad_images, CandidatePool, DataError, FeatureStore, ImageRecord};
use crate::numerics::{NumericsError, ParamBindings, ParamStore, Scalar, Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;
use layers::{
    cross_attention_block, encoder_stack_fw, ffn_block, head_fw, object_embed_fw,
    self_attention_block, text_embed_fw, CrossLayerParams, EncoderLayerParams, HeadParams,
    ObjectEmbedParams, ParamBuilder, TextEmbedParams,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocab_size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("token sequence length {got} != configured max_len {want}")]
    WrongSequenceLength { got: usize, want: usize },
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Architecture hyperparameters. Defaults are the desk-scale shape the test
/// suite runs at; production-scale values are configuration, not code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub l_lang: usize,
    pub l_obj: usize,
    pub l_cross: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_obj: usize,
    pub d_feat: usize,
    /// Shared embedding width of the dual-encoder baseline.
    #[serde(default = "default_d_emb")]
    pub d_emb: usize,
    /// Accepted as a config hook; only 0.0 is supported.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_d_emb() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            l_lang: 2,
            l_obj: 2,
            l_cross: 2,
            vocab_size: 64,
            max_len: 16,
            n_obj: 4,
            d_feat: 8,
            d_emb: 8,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny shape for full-model finite-difference checks.
    pub fn gradcheck_dims() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            l_lang: 2,
            l_obj: 2,
            l_cross: 2,
            vocab_size: 16,
            max_len: 6,
            n_obj: 2,
            d_feat: 4,
            d_emb: 4,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("l_lang", self.l_lang),
            ("l_obj", self.l_obj),
            ("l_cross", self.l_cross),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("n_obj", self.n_obj),
            ("d_feat", self.d_feat),
            ("d_emb", self.d_emb),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.dropout != 0.0 {
            return bad(format!(
                "dropout is a config hook; only 0.0 is supported, got {}",
                self.dropout
            ));
        }
        Ok(())
    }
}

struct MatcherParams {
    text_embed: TextEmbedParams,
    obj_embed: ObjectEmbedParams,
    lang: Vec<EncoderLayerParams>,
    obj: Vec<EncoderLayerParams>,
    cross: Vec<CrossLayerParams>,
    head: HeadParams,
}

/// The mid-fusion cross-modal matcher.
pub struct CrossModalMatcher<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    params: MatcherParams,
}

impl<T: Scalar> CrossModalMatcher<T> {
    /// Deterministic init under `config.seed`: Gaussian(0, 0.02) weights,
    /// zero biases, unit-gamma/zero-beta layer norms.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let (d, d_ff) = (config.d_model, config.d_ff);

        let text_embed = b.text_embed("embed", config.vocab_size, config.max_len, d);
        let obj_embed = b.object_embed("objects", config.d_feat, d);
        let lang = (0..config.l_lang)
            .map(|i| b.encoder_layer(&format!("lang.{i}"), d, d_ff))
            .collect();
        let obj = (0..config.l_obj)
            .map(|i| b.encoder_layer(&format!("obj.{i}"), d, d_ff))
            .collect();
        let cross = (0..config.l_cross)
            .map(|i| b.cross_layer(&format!("cross.{i}"), d, d_ff))
            .collect();
        let head = b.head("head", d);

        Ok(Self {
            config: config.clone(),
            store,
            params: MatcherParams {
                text_embed,
                obj_embed,
                lang,
                obj,
                cross,
                head,
            },
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

    /// Trainable-parameter mask; with frozen encoders only the head trains.
    pub fn trainable_mask(&self, freeze_encoders: bool) -> Vec<bool> {
        self.store
            .iter()
            .map(|(_, p)| !freeze_encoders || p.name.starts_with("head."))
            .collect()
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<(), ModelError> {
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
        Ok(())
    }

    /// Word embedding + learned position embedding, then layer norm.
    pub fn embed_text(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        tokens: &TokenSequence,
    ) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        Ok(text_embed_fw(tape, bind, &self.params.text_embed, &tokens.ids)?)
    }

    /// Object embedding `(LN(feat W_f) + LN(box W_p)) / 2`; no positional
    /// term, so object order never matters.
    pub fn embed_objects(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        boxes: &Tensor<T>,
        feats: &Tensor<T>,
    ) -> Result<Var, ModelError> {
        Ok(object_embed_fw(tape, bind, &self.params.obj_embed, boxes, feats)?)
    }

    pub fn encode_language(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        x: Var,
        mask: &[bool],
    ) -> Result<Var, ModelError> {
        Ok(encoder_stack_fw(
            tape,
            bind,
            &self.params.lang,
            x,
            self.config.n_heads,
            mask,
        )?)
    }

    pub fn encode_objects(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        x: Var,
        mask: &[bool],
    ) -> Result<Var, ModelError> {
        Ok(encoder_stack_fw(
            tape,
            bind,
            &self.params.obj,
            x,
            self.config.n_heads,
            mask,
        )?)
    }

    /// The cross-modal stack. Per layer: bidirectional cross-attention
    /// (shared module, both directions computed from the incoming streams),
    /// then per-stream self-attention, then per-stream feed-forward, each
    /// with residual + layer norm.
    pub fn encode_cross(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        text: Var,
        obj: Var,
        text_mask: &[bool],
        obj_mask: &[bool],
    ) -> Result<(Var, Var), ModelError> {
        let heads = self.config.n_heads;
        let (mut text_h, mut obj_h) = (text, obj);
        for layer in &self.params.cross {
            let text_c = cross_attention_block(
                tape,
                bind,
                &layer.cross_attn,
                &layer.cross_ln,
                text_h,
                obj_h,
                heads,
                obj_mask,
            )?;
            let obj_c = cross_attention_block(
                tape,
                bind,
                &layer.cross_attn,
                &layer.cross_ln,
                obj_h,
                text_h,
                heads,
                text_mask,
            )?;
            let text_s = self_attention_block(
                tape,
                bind,
                &layer.text_self,
                &layer.text_self_ln,
                text_c,
                heads,
                text_mask,
            )?;
            let obj_s = self_attention_block(
                tape,
                bind,
                &layer.obj_self,
                &layer.obj_self_ln,
                obj_c,
                heads,
                obj_mask,
            )?;
            text_h = ffn_block(tape, bind, &layer.text_ffn, &layer.text_ffn_ln, text_s)?;
            obj_h = ffn_block(tape, bind, &layer.obj_ffn, &layer.obj_ffn_ln, obj_s)?;
        }
        Ok((text_h, obj_h))
    }

    /// The five-stage head over the pooled `[1, d]` vector.
    pub fn head(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        pooled: Var,
    ) -> Result<Var, ModelError> {
        Ok(head_fw(tape, bind, &self.params.head, pooled)?)
    }

    /// Full pipeline on an existing tape; returns the `[1, 1]` probability
    /// node so callers can attach a loss.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBindings,
        tokens: &TokenSequence,
        boxes: &Tensor<T>,
        feats: &Tensor<T>,
        obj_mask: &[bool],
    ) -> Result<Var, ModelError> {
        let text_mask = tokens.mask_bools();
        let text = self.embed_text(tape, bind, tokens)?;
        let obj = self.embed_objects(tape, bind, boxes, feats)?;
        let text_h = self.encode_language(tape, bind, text, &text_mask)?;
        let obj_h = self.encode_objects(tape, bind, obj, obj_mask)?;
        let (text_x, _obj_x) =
            self.encode_cross(tape, bind, text_h, obj_h, &text_mask, obj_mask)?;
        let pooled = tape.slice_rows(text_x, 0, 1)?;
        self.head(tape, bind, pooled)
    }

    /// Relevance R(k, m) of an encoded phrase to an image record.
    pub fn score(&self, tokens: &TokenSequence, image: &ImageRecord) -> Result<T, ModelError> {
        let batch = pad_images::<T>(&[image], self.config.n_obj)?;
        let (boxes, feats, mask) = batch.example(0);
        let mut tape = Tape::new();
        let bind = tape.bind_all(&self.store);
        let prob = self.forward_on_tape(&mut tape, &bind, tokens, &boxes, &feats, &mask)?;
        Ok(tape.value(prob).item())
    }

    /// Score every pool image and rank descending; ties break by ascending
    /// image id.
    pub fn rank_pool(
        &self,
        tokens: &TokenSequence,
        pool: &CandidatePool,
        features: &FeatureStore,
    ) -> Result<Vec<(String, T)>, ModelError> {
        rank_with(pool, features, |image| self.score(tokens, image))
    }
}

/// Shared ranking helper: score every pool image with `scorer`, sort by
/// descending score with ascending-id tie-break.
pub fn rank_with<T: Scalar, E>(
    pool: &CandidatePool,
    features: &FeatureStore,
    mut scorer: impl FnMut(&ImageRecord) -> Result<T, E>,
) -> Result<Vec<(String, T)>, E>
where
    E: From<ModelError>,
{
    let mut ranked = Vec::with_capacity(pool.image_ids.len());
    for id in &pool.image_ids {
        let record = features
            .get(id)
            .ok_or_else(|| E::from(ModelError::UnknownImage(id.clone())))?;
        ranked.push((id.clone(), scorer(record)?));
    }
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(ranked)
}
