//! Scratch probe for training dynamics (run with --nocapture).

mod common;

use std::time::Instant;

use xmodal_core::config::{ModelKind, OptimConfig};
use xmodal_core::data::synth::{synth_generate, SynthSpec};
use xmodal_core::data::FeatureStore;
use xmodal_core::model::ModelConfig;
use xmodal_core::tokenizer::Vocabulary;
use xmodal_core::train::{evaluate_model, mean_bce, train_model, AnyModel};

#[test]
#[ignore = "manual probe"]
fn probe_overfit_and_heldout() {
    let spec = SynthSpec {
        n_images: 16,
        n_train: 32,
        n_eval: 0,
        ..SynthSpec::default()
    };
    let corpus = synth_generate(&spec, 7).unwrap();
    let vocab = Vocabulary::from_tokens(corpus.vocab.clone()).unwrap();
    let features = FeatureStore::from_records(
        corpus.features.clone(),
        &xmodal_core::data::FeatureLimits {
            n_obj: spec.max_objects,
            d_feat: spec.d_feat,
        },
    )
    .unwrap();

    let mut cfg = ModelConfig::default();
    cfg.vocab_size = vocab.len().max(cfg.vocab_size);
    cfg.seed = 7;
    let optim = OptimConfig {
        steps: 500,
        lr: 3e-3,
        warmup_steps: 50,
        grad_clip: Some(1.0),
        batch_size: 32,
        ..OptimConfig::default()
    };

    let start = Instant::now();
    let mut model = AnyModel::<f64>::init(ModelKind::Cross, &cfg).unwrap();
    let mut losses = Vec::new();
    train_model(
        &mut model,
        &optim,
        7,
        false,
        &vocab,
        &features,
        &corpus.train_pairs,
        |step, loss| {
            if step % 50 == 0 {
                println!("step {step}: loss {loss:.5}");
            }
            losses.push(loss);
        },
    )
    .unwrap();
    println!("500 steps in {:?}", start.elapsed());
    let bce = mean_bce(&model, &corpus.train_pairs, &features, &vocab).unwrap();
    println!("final train BCE: {bce:.6}");
    let row = evaluate_model(&model, "train", &corpus.train_pairs, &features, &vocab).unwrap();
    println!("train AUC: {}", row.auc);

    // Held-out probe.
    let spec2 = SynthSpec::default();
    let corpus2 = synth_generate(&spec2, 11).unwrap();
    let vocab2 = Vocabulary::from_tokens(corpus2.vocab.clone()).unwrap();
    let features2 = FeatureStore::from_records(
        corpus2.features.clone(),
        &xmodal_core::data::FeatureLimits {
            n_obj: spec2.max_objects,
            d_feat: spec2.d_feat,
        },
    )
    .unwrap();
    for (lr, steps, warmup, clip, batch) in [
        (3e-3, 1200, 50, Some(1.0), 50),
        (3e-3, 800, 50, Some(1.0), 100),
        (2e-3, 1500, 50, Some(1.0), 64),
        (5e-3, 800, 100, Some(1.0), 100),
    ] {
        for kind in [ModelKind::Cross] {
            let start = Instant::now();
            let mut cfg2 = ModelConfig::default();
            cfg2.seed = 11;
            let mut model = AnyModel::<f64>::init(kind, &cfg2).unwrap();
            let optim2 = OptimConfig {
                steps,
                lr,
                warmup_steps: warmup,
                grad_clip: clip,
                batch_size: batch,
                ..OptimConfig::default()
            };
            train_model(
                &mut model,
                &optim2,
                11,
                false,
                &vocab2,
                &features2,
                &corpus2.train_pairs,
                |_, _| {},
            )
            .unwrap();
            let row =
                evaluate_model(&model, "eval", &corpus2.eval_pairs, &features2, &vocab2).unwrap();
            let train_row =
                evaluate_model(&model, "train", &corpus2.train_pairs, &features2, &vocab2)
                    .unwrap();
            println!(
                "{kind} lr={lr} steps={steps} warmup={warmup} clip={clip:?} batch={batch}: {:?}, train AUC {:.4}, eval AUC {:.4}, F1@0.5 {:.4}, bestF1 {:.4}",
                start.elapsed(),
                train_row.auc,
                row.auc,
                row.f1_at_half,
                row.best_f1
            );
        }
    }
}
