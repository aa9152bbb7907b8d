//! Training-loop orchestration over the three model kinds, plus the
//! config-driven entry points behind the command-line surface: train,
//! eval, rank, and the full-model gradient check.
//!
//! Losses: binary cross-entropy for the cross-modal and early-fusion
//! matchers (relevance as binary classification), symmetric contrastive
//! loss over positive pairs for the dual encoder (the 1:1 assumption).

use std::collections::HashMap;

use crate::baselines::{DualEncoder, EarlyFusionMatcher};
use crate::checkpoint::{self, CheckpointHeader};
use crate::config::{ModelKind, OptimConfig, RunConfig};
use crate::data::{
    load_pairs, load_pool, make_batches, pad_images, CandidatePool, FeatureLimits, FeatureStore,
    ImageRecord, LabeledPair,
};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{CrossModalMatcher, ModelConfig, ModelError};
use crate::numerics::{
    grad_check, AdamHyper, AdamState, ParamStore, Scalar, Tape, Tensor, FD_STEP,
};
use crate::tokenizer::{TokenSequence, Vocabulary};
use crate::Error;

/// Any of the three trainable model kinds behind one scoring surface.
pub enum AnyModel<T: Scalar> {
    Cross(CrossModalMatcher<T>),
    Early(EarlyFusionMatcher<T>),
    Dual(DualEncoder<T>),
}

impl<T: Scalar> AnyModel<T> {
    pub fn init(kind: ModelKind, config: &ModelConfig) -> Result<Self, ModelError> {
        Ok(match kind {
            ModelKind::Cross => AnyModel::Cross(CrossModalMatcher::init(config)?),
            ModelKind::Early => AnyModel::Early(EarlyFusionMatcher::init(config)?),
            ModelKind::Dual => AnyModel::Dual(DualEncoder::init(config)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Cross(_) => ModelKind::Cross,
            AnyModel::Early(_) => ModelKind::Early,
            AnyModel::Dual(_) => ModelKind::Dual,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Cross(m) => m.config(),
            AnyModel::Early(m) => m.config(),
            AnyModel::Dual(m) => m.config(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            AnyModel::Cross(m) => m.store(),
            AnyModel::Early(m) => m.store(),
            AnyModel::Dual(m) => m.store(),
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            AnyModel::Cross(m) => m.store_mut(),
            AnyModel::Early(m) => m.store_mut(),
            AnyModel::Dual(m) => m.store_mut(),
        }
    }

    pub fn trainable_mask(&self, freeze_encoders: bool) -> Vec<bool> {
        match self {
            AnyModel::Cross(m) => m.trainable_mask(freeze_encoders),
            AnyModel::Early(m) => m.trainable_mask(freeze_encoders),
            AnyModel::Dual(m) => m.trainable_mask(freeze_encoders),
        }
    }

    /// Relevance for cross/early (in (0,1)); raw cosine for dual.
    pub fn score(&self, tokens: &TokenSequence, image: &ImageRecord) -> Result<T, ModelError> {
        match self {
            AnyModel::Cross(m) => m.score(tokens, image),
            AnyModel::Early(m) => m.score(tokens, image),
            AnyModel::Dual(m) => m.score(tokens, image),
        }
    }

    pub fn rank_pool(
        &self,
        tokens: &TokenSequence,
        pool: &CandidatePool,
        features: &FeatureStore,
    ) -> Result<Vec<(String, T)>, ModelError> {
        match self {
            AnyModel::Cross(m) => m.rank_pool(tokens, pool, features),
            AnyModel::Early(m) => m.rank_pool(tokens, pool, features),
            AnyModel::Dual(m) => m.rank_pool(tokens, pool, features),
        }
    }
}

/// Caches phrase encodings; tokenization is deterministic so this is purely
/// a speed matter.
pub struct PhraseEncoder<'a> {
    vocab: &'a Vocabulary,
    max_len: usize,
    cache: HashMap<String, TokenSequence>,
}

impl<'a> PhraseEncoder<'a> {
    pub fn new(vocab: &'a Vocabulary, max_len: usize) -> Self {
        Self {
            vocab,
            max_len,
            cache: HashMap::new(),
        }
    }

    pub fn encode(&mut self, phrase: &str) -> Result<TokenSequence, Error> {
        if let Some(seq) = self.cache.get(phrase) {
            return Ok(seq.clone());
        }
        let seq = self.vocab.encode(phrase, self.max_len)?;
        self.cache.insert(phrase.to_string(), seq.clone());
        Ok(seq)
    }
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One training example in tensor form.
pub type TrainExample<T> = (TokenSequence, Tensor<T>, Tensor<T>, Vec<bool>, bool);

/// Build the examples of one batch: padded image tensors plus encoded
/// phrase and label.
fn prepare_examples<T: Scalar>(
    batch: &[LabeledPair],
    features: &FeatureStore,
    encoder: &mut PhraseEncoder,
    n_obj: usize,
) -> Result<Vec<TrainExample<T>>, Error> {
    let mut examples = Vec::with_capacity(batch.len());
    for pair in batch {
        let record = features
            .get(&pair.image_id)
            .ok_or_else(|| ModelError::UnknownImage(pair.image_id.clone()))?;
        let padded = pad_images::<T>(&[record], n_obj).map_err(ModelError::from)?;
        let (boxes, feats, mask) = padded.example(0);
        let tokens = encoder.encode(&pair.phrase)?;
        examples.push((tokens, boxes, feats, mask, pair.label == 1));
    }
    Ok(examples)
}

/// Forward a batch and attach the model's loss: mean BCE for the matchers,
/// symmetric contrastive for the dual encoder.
pub fn forward_loss<T: Scalar>(
    model: &AnyModel<T>,
    store: &ParamStore<T>,
    examples: &[TrainExample<T>],
) -> Result<(Tape<T>, crate::numerics::Var), Error> {
    let mut tape = Tape::new();
    let bind = tape.bind_all(store);
    let loss = match model {
        AnyModel::Cross(_) | AnyModel::Early(_) => {
            let mut losses = Vec::with_capacity(examples.len());
            for (tokens, boxes, feats, mask, label) in examples {
                let p = match model {
                    AnyModel::Cross(m) => {
                        m.forward_on_tape(&mut tape, &bind, tokens, boxes, feats, mask)?
                    }
                    AnyModel::Early(m) => {
                        m.forward_on_tape(&mut tape, &bind, tokens, boxes, feats, mask)?
                    }
                    AnyModel::Dual(_) => unreachable!(),
                };
                losses.push(tape.bce_loss(p, *label).map_err(ModelError::from)?);
            }
            tape.mean_of(&losses).map_err(ModelError::from)?
        }
        AnyModel::Dual(m) => {
            let batch: Vec<_> = examples
                .iter()
                .map(|(t, b, f, k, _)| (t.clone(), b.clone(), f.clone(), k.clone()))
                .collect();
            m.contrastive_loss_on_tape(&mut tape, &bind, &batch)?
        }
    };
    Ok((tape, loss))
}

/// One optimizer step on one batch; returns the batch loss.
fn batch_step<T: Scalar>(
    model: &mut AnyModel<T>,
    batch: &[LabeledPair],
    features: &FeatureStore,
    encoder: &mut PhraseEncoder,
    adam: &mut AdamState<T>,
    trainable: &[bool],
    grad_clip: Option<f64>,
) -> Result<T, Error> {
    let examples = prepare_examples(batch, features, encoder, model.config().n_obj)?;
    let (tape, loss) = forward_loss(model, model.store(), &examples)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss).map_err(ModelError::from)?;
    tape.accumulate_param_grads(&grads, model.store_mut());
    if let Some(clip) = grad_clip {
        model
            .store_mut()
            .clip_grad_norm(T::cast(clip), Some(trainable));
    }
    adam.step(model.store_mut(), Some(trainable));
    model.store_mut().zero_grads();
    Ok(loss_value)
}

/// Run `optim.steps` optimizer steps, reshuffling each epoch under a seed
/// derived from `seed`. The dual encoder trains on positive pairs only and
/// skips tail batches too small for a contrastive loss.
pub fn train_model<T: Scalar>(
    model: &mut AnyModel<T>,
    optim: &OptimConfig,
    seed: u64,
    freeze_encoders: bool,
    vocab: &Vocabulary,
    features: &FeatureStore,
    pairs: &[LabeledPair],
    mut on_step: impl FnMut(u64, f64),
) -> Result<(), Error> {
    let training_pairs: Vec<LabeledPair> = match model.kind() {
        ModelKind::Dual => pairs.iter().filter(|p| p.label == 1).cloned().collect(),
        _ => pairs.to_vec(),
    };
    if training_pairs.is_empty() {
        return Err(Error::Config("no training pairs for this model kind".into()));
    }
    if model.kind() == ModelKind::Dual && training_pairs.len() < 2 {
        return Err(ModelError::BatchTooSmall(training_pairs.len()).into());
    }

    let hyper = AdamHyper {
        lr: T::cast(optim.lr),
        beta1: T::cast(optim.beta1),
        beta2: T::cast(optim.beta2),
        eps: T::cast(optim.eps),
    };
    let mut adam = AdamState::new(model.store(), hyper);
    let trainable = model.trainable_mask(freeze_encoders);
    let mut encoder = PhraseEncoder::new(vocab, model.config().max_len);

    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < optim.steps {
        let batches = make_batches(
            &training_pairs,
            features,
            optim.batch_size,
            epoch_seed(seed, epoch),
        )?;
        for batch in &batches {
            if step >= optim.steps {
                break;
            }
            if model.kind() == ModelKind::Dual && batch.len() < 2 {
                continue; // tail batch too small for in-batch negatives
            }
            if optim.warmup_steps > 0 {
                let ramp = ((step + 1) as f64 / optim.warmup_steps as f64).min(1.0);
                adam.hyper.lr = T::cast(optim.lr * ramp);
            }
            let loss = batch_step(
                model,
                batch,
                features,
                &mut encoder,
                &mut adam,
                &trainable,
                optim.grad_clip,
            )?;
            step += 1;
            on_step(step, loss.to_f64().expect("loss fits f64"));
        }
        epoch += 1;
    }
    Ok(())
}

/// Mean BCE of a matcher over a labeled set (evaluation-time diagnostic).
pub fn mean_bce<T: Scalar>(
    model: &AnyModel<T>,
    pairs: &[LabeledPair],
    features: &FeatureStore,
    vocab: &Vocabulary,
) -> Result<f64, Error> {
    let mut encoder = PhraseEncoder::new(vocab, model.config().max_len);
    let mut total = 0.0;
    for pair in pairs {
        let record = features
            .get(&pair.image_id)
            .ok_or_else(|| ModelError::UnknownImage(pair.image_id.clone()))?;
        let tokens = encoder.encode(&pair.phrase)?;
        let p = model
            .score(&tokens, record)?
            .to_f64()
            .expect("score fits f64");
        let p = p.clamp(crate::numerics::BCE_CLAMP, 1.0 - crate::numerics::BCE_CLAMP);
        total += if pair.label == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    Ok(total / pairs.len() as f64)
}

/// Evaluate a model over one labeled set into a report row.
pub fn evaluate_model<T: Scalar>(
    model: &AnyModel<T>,
    dataset_name: &str,
    pairs: &[LabeledPair],
    features: &FeatureStore,
    vocab: &Vocabulary,
) -> Result<crate::metrics::EvalRow, Error> {
    let mut encoder = PhraseEncoder::new(vocab, model.config().max_len);
    evaluate(
        &model.kind().to_string(),
        dataset_name,
        pairs,
        features,
        |pair, record| {
            let tokens = encoder.encode(&pair.phrase)?;
            Ok(model.score(&tokens, record)?)
        },
    )
}

// ── config-driven entry points ──────────────────────────────────────

pub struct LoadedData {
    pub vocab: Vocabulary,
    pub features: FeatureStore,
}

fn load_common(cfg: &RunConfig, command: &str) -> Result<LoadedData, Error> {
    let mut vocab = Vocabulary::load(cfg.vocab_path(command)?)?;
    vocab.set_lowercase(cfg.lowercase);
    if vocab.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "vocab has {} tokens but model.vocab_size is {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    let limits = FeatureLimits {
        n_obj: cfg.model.n_obj,
        d_feat: cfg.model.d_feat,
    };
    let features = FeatureStore::load(cfg.features_path(command)?, &limits)?;
    Ok(LoadedData { vocab, features })
}

/// `train`: run the optimizer and save a checkpoint. Deterministic under
/// the configured seed.
pub fn run_train(
    cfg: &RunConfig,
    mut on_step: impl FnMut(u64, f64),
) -> Result<AnyModel<f64>, Error> {
    cfg.validate_for_train()?;
    let seed = cfg.train_seed()?;
    let data = load_common(cfg, "train")?;
    let pairs = load_pairs(cfg.train_pairs_path("train")?)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = seed;
    let mut model = AnyModel::<f64>::init(cfg.model_kind, &model_cfg)?;
    if let Some(init_path) = &cfg.init_checkpoint {
        let (header, entries) = checkpoint::load(init_path)?;
        if header.kind != cfg.model_kind {
            return Err(crate::checkpoint::CheckpointError::KindMismatch {
                expected: cfg.model_kind,
                found: header.kind,
            }
            .into());
        }
        checkpoint::apply(model.store_mut(), &entries)?;
    }

    train_model(
        &mut model,
        &cfg.optim,
        seed,
        cfg.freeze_encoders,
        &data.vocab,
        &data.features,
        &pairs,
        &mut on_step,
    )?;

    let header = CheckpointHeader {
        kind: cfg.model_kind,
        model: model_cfg,
        optim: cfg.optim.clone(),
    };
    checkpoint::save(cfg.checkpoint_path("train")?, &header, model.store())?;
    Ok(model)
}

/// Load the checkpoint named by the config and rebuild its model.
pub fn load_model(cfg: &RunConfig) -> Result<AnyModel<f64>, Error> {
    let path = cfg.checkpoint_path("eval/rank")?;
    let (header, entries) = checkpoint::load(path)?;
    let mut model = AnyModel::<f64>::init(header.kind, &header.model)?;
    checkpoint::apply(model.store_mut(), &entries)?;
    Ok(model)
}

/// `eval`: one report row per eval set for the checkpointed model.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport, Error> {
    if cfg.paths.eval_pairs.is_empty() {
        return Err(Error::Config("`eval` needs at least one eval-pairs path".into()));
    }
    let model = load_model(cfg)?;
    let mut run_cfg = cfg.clone();
    run_cfg.model = model.config().clone();
    let data = load_common(&run_cfg, "eval")?;
    let mut report = EvalReport::default();
    for path in &cfg.paths.eval_pairs {
        let pairs = load_pairs(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        report.push(evaluate_model(
            &model,
            &name,
            &pairs,
            &data.features,
            &data.vocab,
        )?);
    }
    Ok(report)
}

/// `rank`: order the pool for one phrase.
pub fn run_rank(cfg: &RunConfig, phrase: &str) -> Result<Vec<(String, f64)>, Error> {
    let model = load_model(cfg)?;
    let mut run_cfg = cfg.clone();
    run_cfg.model = model.config().clone();
    let data = load_common(&run_cfg, "rank")?;
    let pool = load_pool(cfg.pool_path("rank")?)?;
    let tokens = data.vocab.encode(phrase, model.config().max_len)?;
    Ok(model.rank_pool(&tokens, &pool, &data.features)?)
}

/// Full-model finite-difference check for one model kind at the dedicated
/// tiny dims; returns the max relative error.
pub fn run_gradcheck(kind: ModelKind, seed: u64) -> Result<f64, Error> {
    use rand::{Rng, SeedableRng};
    let mut cfg = ModelConfig::gradcheck_dims();
    cfg.seed = seed;
    let mut model = AnyModel::<f64>::init(kind, &cfg)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));

    // A small synthetic batch; the dual encoder needs >= 2 pairs.
    let batch_size = if kind == ModelKind::Dual { 3 } else { 2 };
    let mut examples = Vec::new();
    for i in 0..batch_size {
        let n_objects = 1 + rng.gen_range(0..cfg.n_obj);
        let record = ImageRecord {
            image_id: format!("img{i}"),
            objects: (0..n_objects)
                .map(|_| crate::data::DetectedObject {
                    bbox: {
                        let x1 = rng.gen_range(0.0..0.4);
                        let y1 = rng.gen_range(0.0..0.4);
                        [x1, y1, x1 + rng.gen_range(0.1..0.5), y1 + rng.gen_range(0.1..0.5)]
                    },
                    feat: (0..cfg.d_feat).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect(),
        };
        let padded = pad_images::<f64>(&[&record], cfg.n_obj).map_err(ModelError::from)?;
        let (boxes, feats, mask) = padded.example(0);
        let body: Vec<usize> = (0..rng.gen_range(1..cfg.max_len - 1))
            .map(|_| rng.gen_range(4..cfg.vocab_size))
            .collect();
        let mut ids = vec![2];
        ids.extend(body);
        ids.truncate(cfg.max_len - 1);
        ids.push(3);
        let true_length = ids.len();
        ids.resize(cfg.max_len, 0);
        let mut mask_bits = vec![0u8; cfg.max_len];
        mask_bits[..true_length].fill(1);
        let tokens = TokenSequence {
            ids,
            mask: mask_bits,
            true_length,
        };
        examples.push((tokens, boxes, feats, mask, i % 2 == 0));
    }

    // Analytic pass populates the grads; FD re-evaluates the forward.
    let (tape, loss) = forward_loss(&model, model.store(), &examples)?;
    let grads = tape.backward(loss).map_err(ModelError::from)?;
    tape.accumulate_param_grads(&grads, model.store_mut());

    let model_ref = &model;
    let mut probe_store = model_ref.store().clone();
    let err = grad_check(
        &mut probe_store,
        |s| {
            let (tape, loss) = forward_loss(model_ref, s, &examples)
                .expect("forward succeeded during analytic pass");
            tape.value(loss).item()
        },
        FD_STEP,
    );
    Ok(err)
}
