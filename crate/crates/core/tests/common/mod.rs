//! Shared generators for the integration suites.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xmodal_core::data::{DetectedObject, ImageRecord};
use xmodal_core::model::ModelConfig;
use xmodal_core::tokenizer::TokenSequence;

/// Desk-scale config the acceptance criteria are pinned at.
pub fn desk_config() -> ModelConfig {
    ModelConfig::default()
}

pub fn random_record(rng: &mut ChaCha8Rng, id: &str, n_objects: usize, d_feat: usize) -> ImageRecord {
    ImageRecord {
        image_id: id.to_string(),
        objects: (0..n_objects)
            .map(|_| DetectedObject {
                bbox: {
                    let x1 = rng.gen_range(0.0..0.5);
                    let y1 = rng.gen_range(0.0..0.5);
                    [
                        x1,
                        y1,
                        x1 + rng.gen_range(0.05..0.5),
                        y1 + rng.gen_range(0.05..0.5),
                    ]
                },
                feat: (0..d_feat).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect(),
    }
}

/// A well-formed token sequence: `[CLS] body.. [SEP] [PAD]..` with ids drawn
/// from `4..vocab_size` (0..3 are reserved for the specials by convention).
pub fn random_tokens(rng: &mut ChaCha8Rng, vocab_size: usize, max_len: usize) -> TokenSequence {
    let body_len = rng.gen_range(0..=max_len - 2);
    let mut ids = vec![2]; // CLS
    for _ in 0..body_len {
        ids.push(rng.gen_range(4..vocab_size));
    }
    ids.push(3); // SEP
    let true_length = ids.len();
    ids.resize(max_len, 0);
    let mut mask = vec![0u8; max_len];
    mask[..true_length].fill(1);
    TokenSequence {
        ids,
        mask,
        true_length,
    }
}
