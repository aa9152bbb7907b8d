//! Contracts of the two baselines: shallow-interaction decomposition of the
//! dual encoder, contrastive-loss closed forms, early-fusion masking and
//! ablation behavior, and full-model gradient checks for both.

mod common;

use common::{random_record, random_tokens};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmodal_core::baselines::{symmetric_cross_entropy, DualEncoder, EarlyFusionMatcher};
use xmodal_core::data::pad_images;
use xmodal_core::model::ModelConfig;
use xmodal_core::numerics::{grad_check, Tape, Tensor, FD_STEP};
use xmodal_core::tokenizer::TokenSequence;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_len: 6,
        n_obj: 3,
        d_feat: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        l_lang: 1,
        l_obj: 1,
        l_cross: 1,
        d_emb: 4,
        ..ModelConfig::default()
    }
}

type Example = (TokenSequence, Tensor<f64>, Tensor<f64>, Vec<bool>);

fn batch_of(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let rec = random_record(rng, &format!("img{i}"), 1 + i % cfg.n_obj, cfg.d_feat);
            let batch = pad_images::<f64>(&[&rec], cfg.n_obj).unwrap();
            let (boxes, feats, mask) = batch.example(0);
            let toks = random_tokens(rng, cfg.vocab_size, cfg.max_len);
            (toks, boxes, feats, mask)
        })
        .collect()
}

// ── dual encoder ────────────────────────────────────────────────────

#[test]
fn dual_embeddings_are_unit_and_cosine_bounded() {
    let cfg = tiny();
    let dual = DualEncoder::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10 {
        let rec = random_record(&mut rng, &format!("i{i}"), 1 + i % cfg.n_obj, cfg.d_feat);
        let toks = random_tokens(&mut rng, cfg.vocab_size, cfg.max_len);
        let t = dual.embed_text(&toks).unwrap();
        let m = dual.embed_image(&rec).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&t) - 1.0).abs() < 1e-10);
        assert!((norm(&m) - 1.0).abs() < 1e-10);
        let score = dual.score(&toks, &rec).unwrap();
        assert!((-1.0..=1.0).contains(&score), "cosine out of range: {score}");
        // Identical embeddings give similarity 1, antipodal give -1.
        let self_sim: f64 = m.iter().map(|v| v * v).sum();
        assert!((self_sim - 1.0).abs() < 1e-10);
        let anti: f64 = m.iter().map(|v| -v * v).sum();
        assert!((anti + 1.0).abs() < 1e-10);
    }
}

#[test]
fn dual_score_is_object_permutation_invariant() {
    let cfg = tiny();
    let dual = DualEncoder::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rec = random_record(&mut rng, "a", 3, cfg.d_feat);
    let toks = random_tokens(&mut rng, cfg.vocab_size, cfg.max_len);
    let base = dual.score(&toks, &rec).unwrap();
    let mut perm = rec.clone();
    perm.objects.rotate_left(1);
    let permuted = dual.score(&toks, &perm).unwrap();
    assert!((base - permuted).abs() < 1e-10);
}

#[test]
fn precomputed_image_embedding_scores_bit_exactly() {
    // The operational meaning of shallow interaction: embed once per image,
    // score later with a plain dot product.
    let cfg = tiny();
    let dual = DualEncoder::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rec = random_record(&mut rng, "a", 2, cfg.d_feat);
    let toks = random_tokens(&mut rng, cfg.vocab_size, cfg.max_len);
    let cached = dual.embed_image(&rec).unwrap();
    let text = dual.embed_text(&toks).unwrap();
    let via_cache: f64 = cached.iter().zip(&text).map(|(a, b)| a * b).sum();
    let end_to_end = dual.score(&toks, &rec).unwrap();
    assert_eq!(via_cache.to_bits(), end_to_end.to_bits());
}

#[test]
fn contrastive_closed_forms() {
    // All logits equal: loss = ln n, exactly (to 1e-12).
    for n in [2usize, 4, 8] {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::full(vec![n, n], 1.3));
        let loss = symmetric_cross_entropy(&mut tape, logits).unwrap();
        assert!((tape.value(loss).item() - (n as f64).ln()).abs() < 1e-12);
    }

    // Hand case: [[2, 0], [0, 2]] -> ln(1 + e^-2) in every direction.
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_vec(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    let loss = symmetric_cross_entropy(&mut tape, logits).unwrap();
    let want = (1.0 + (-2.0f64).exp()).ln();
    assert!((tape.value(loss).item() - want).abs() < 1e-12);

    // Large positive diagonal: loss approaches 0.
    let n = 4;
    let mut diag = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        diag.data_mut()[i * n + i] = 50.0;
    }
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(diag);
    let loss = symmetric_cross_entropy(&mut tape, logits).unwrap();
    assert!(tape.value(loss).item() < 1e-12);
}

#[test]
fn contrastive_loss_is_pair_permutation_invariant() {
    let cfg = tiny();
    let dual = DualEncoder::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = batch_of(&mut rng, &cfg, 5);

    let loss_of = |batch: &[Example]| {
        let mut tape = Tape::new();
        let bind = tape.bind_all(dual.store());
        let loss = dual.contrastive_loss_on_tape(&mut tape, &bind, batch).unwrap();
        tape.value(loss).item()
    };
    let base = loss_of(&batch);
    let mut reordered = batch.clone();
    reordered.rotate_left(2);
    reordered.swap(0, 1);
    let permuted = loss_of(&reordered);
    assert!((base - permuted).abs() < 1e-12, "{base} vs {permuted}");
}

#[test]
fn contrastive_batch_of_one_is_rejected() {
    let cfg = tiny();
    let dual = DualEncoder::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = batch_of(&mut rng, &cfg, 1);
    let mut tape = Tape::new();
    let bind = tape.bind_all(dual.store());
    assert!(dual
        .contrastive_loss_on_tape(&mut tape, &bind, &batch)
        .is_err());
}

#[test]
fn temperature_is_clamped() {
    let cfg = tiny();
    let mut dual = DualEncoder::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = batch_of(&mut rng, &cfg, 3);
    let tau_id = dual.store().id_of("temperature.log_tau").unwrap();

    let loss_with = |dual: &DualEncoder<f64>| {
        let mut tape = Tape::new();
        let bind = tape.bind_all(dual.store());
        let loss = dual
            .contrastive_loss_on_tape(&mut tape, &bind, &batch)
            .unwrap();
        tape.value(loss).item()
    };
    // log_tau = 10 exponentiates far past the cap; must act like exactly 100.
    dual.store_mut().value_mut(tau_id).data_mut()[0] = 10.0;
    let clamped = loss_with(&dual);
    dual.store_mut().value_mut(tau_id).data_mut()[0] = 100.0f64.ln();
    let at_cap = loss_with(&dual);
    assert_eq!(clamped.to_bits(), at_cap.to_bits());
}

// ── early fusion ────────────────────────────────────────────────────

#[test]
fn early_fusion_scores_in_unit_interval_and_permutation_invariant() {
    let cfg = tiny();
    let early = EarlyFusionMatcher::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10 {
        let rec = random_record(&mut rng, &format!("i{i}"), 1 + i % cfg.n_obj, cfg.d_feat);
        let toks = random_tokens(&mut rng, cfg.vocab_size, cfg.max_len);
        let s = early.score(&toks, &rec).unwrap();
        assert!(s > 0.0 && s < 1.0, "score {s}");
        let mut perm = rec.clone();
        perm.objects.reverse();
        let sp = early.score(&toks, &perm).unwrap();
        assert!((s - sp).abs() < 1e-10);
    }
}

#[test]
fn early_fusion_is_padding_invariant() {
    let cfg = tiny();
    let early = EarlyFusionMatcher::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rec = random_record(&mut rng, "a", 2, cfg.d_feat);
    let toks = random_tokens(&mut rng, cfg.vocab_size, cfg.max_len);
    let wide = pad_images::<f64>(&[&rec], cfg.n_obj).unwrap();
    let tight = pad_images::<f64>(&[&rec], 2).unwrap();
    let score = |batch: &xmodal_core::data::PaddedImageBatch<f64>| {
        let (boxes, feats, mask) = batch.example(0);
        let mut tape = Tape::new();
        let bind = tape.bind_all(early.store());
        let p = early
            .forward_on_tape(&mut tape, &bind, &toks, &boxes, &feats, &mask)
            .unwrap();
        tape.value(p).item()
    };
    assert!((score(&wide) - score(&tight)).abs() < 1e-10);
}

#[test]
fn early_fusion_with_dead_attention_ignores_the_image() {
    let cfg = tiny();
    let mut early = EarlyFusionMatcher::<f64>::init(&cfg).unwrap();
    for i in 0..EarlyFusionMatcher::<f64>::depth(&cfg) {
        for name in [
            format!("stack.{i}.attn.wo.weight"),
            format!("stack.{i}.attn.wo.bias"),
        ] {
            let id = early.store().id_of(&name).unwrap();
            early.store_mut().value_mut(id).fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let toks = random_tokens(&mut rng, cfg.vocab_size, cfg.max_len);
    let a = early
        .score(&toks, &random_record(&mut rng, "a", 3, cfg.d_feat))
        .unwrap();
    let b = early
        .score(&toks, &random_record(&mut rng, "b", 1, cfg.d_feat))
        .unwrap();
    assert_eq!(a.to_bits(), b.to_bits(), "image leaked around dead attention");
}

// ── gradient checks ─────────────────────────────────────────────────

#[test]
fn early_fusion_gradient_check() {
    let cfg = ModelConfig::gradcheck_dims();
    let early = EarlyFusionMatcher::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let examples = batch_of(&mut rng, &cfg, 2);

    let loss_of = |store: &xmodal_core::numerics::ParamStore<f64>| {
        let mut tape = Tape::new();
        let bind = tape.bind_all(store);
        let mut losses = Vec::new();
        for (i, (toks, boxes, feats, mask)) in examples.iter().enumerate() {
            let p = early
                .forward_on_tape(&mut tape, &bind, toks, boxes, feats, mask)
                .unwrap();
            losses.push(tape.bce_loss(p, i % 2 == 0).unwrap());
        }
        let loss = tape.mean_of(&losses).unwrap();
        (tape, loss)
    };
    let (tape, loss) = loss_of(early.store());
    let grads = tape.backward(loss).unwrap();
    let mut store = early.store().clone();
    tape.accumulate_param_grads(&grads, &mut store);
    let err = grad_check(
        &mut store,
        |s| {
            let (tape, loss) = loss_of(s);
            tape.value(loss).item()
        },
        FD_STEP,
    );
    assert!(err < 1e-4, "early fusion gradient error {err}");
}

#[test]
fn dual_encoder_gradient_check() {
    let cfg = ModelConfig::gradcheck_dims();
    let dual = DualEncoder::<f64>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let examples = batch_of(&mut rng, &cfg, 3);

    let loss_of = |store: &xmodal_core::numerics::ParamStore<f64>| {
        let mut tape = Tape::new();
        let bind = tape.bind_all(store);
        let loss = dual
            .contrastive_loss_on_tape(&mut tape, &bind, &examples)
            .unwrap();
        (tape, loss)
    };
    let (tape, loss) = loss_of(dual.store());
    let grads = tape.backward(loss).unwrap();
    let mut store = dual.store().clone();
    tape.accumulate_param_grads(&grads, &mut store);
    let err = grad_check(
        &mut store,
        |s| {
            let (tape, loss) = loss_of(s);
            tape.value(loss).item()
        },
        FD_STEP,
    );
    assert!(err < 1e-4, "dual encoder gradient error {err}");
}
