//! Synthetic desk-scale corpus with a deterministic labeling rule.
//!
//! Each concept word carries a code; each image object embeds one code in
//! its feature vector (a dominant one-hot component plus small jitter).
//! A pair is positive exactly when the phrase's concept code appears among
//! the image's object codes, so labels can be re-derived from the emitted
//! files alone.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    write_pairs, write_pool, CandidatePool, DataError, DetectedObject, FeatureStore,
    ImageRecord, LabeledPair,
};
use crate::tokenizer::{CLS_TOKEN, PAD_TOKEN, SEP_TOKEN, UNK_TOKEN};

/// Magnitude of the dominant one-hot component relative to the jitter;
/// keeps the code recoverable by argmax from the files alone.
const CODE_SCALE: f64 = 1.0;
const JITTER_SCALE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Phrase tokens that carry a code (code = index in this list).
    pub concepts: Vec<String>,
    /// Phrase tokens that carry no signal.
    pub fillers: Vec<String>,
    pub n_images: usize,
    /// Objects per image are drawn from `1..=max_objects`.
    pub max_objects: usize,
    pub d_feat: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub pool_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            concepts: [
                "puzzle", "racing", "chess", "farm", "zombie", "soccer", "space", "cooking",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            fillers: ["game", "app", "fun", "play", "pro", "world"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            n_images: 64,
            max_objects: 4,
            d_feat: 8,
            n_train: 400,
            n_eval: 100,
            pool_size: 8,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::BadSynthSpec(msg));
        if self.concepts.is_empty() {
            return bad("need at least one concept".into());
        }
        if self.concepts.len() < 2 {
            return bad("need at least two concepts so negatives exist".into());
        }
        if self.concepts.len() > self.d_feat {
            return bad(format!(
                "{} concepts do not fit one-hot in d_feat {}",
                self.concepts.len(),
                self.d_feat
            ));
        }
        if self.max_objects == 0 || self.n_images < 2 {
            return bad("need max_objects >= 1 and n_images >= 2".into());
        }
        if self.max_objects >= self.concepts.len() {
            return bad(format!(
                "max_objects {} must be below the concept count {} so negatives exist",
                self.max_objects,
                self.concepts.len()
            ));
        }
        if self.pool_size == 0 || self.pool_size > self.n_images {
            return bad("pool_size must be in 1..=n_images".into());
        }
        Ok(())
    }

    /// Vocabulary covering the generator's phrases: specials, fillers,
    /// then concepts.
    pub fn vocab_tokens(&self) -> Vec<String> {
        let mut tokens: Vec<String> = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(self.fillers.iter().cloned());
        tokens.extend(self.concepts.iter().cloned());
        tokens
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub features: Vec<ImageRecord>,
    pub train_pairs: Vec<LabeledPair>,
    pub eval_pairs: Vec<LabeledPair>,
    pub pool: CandidatePool,
    pub vocab: Vec<String>,
}

/// Files written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub features: PathBuf,
    pub train_pairs: PathBuf,
    pub eval_pairs: PathBuf,
    pub pool: PathBuf,
    pub vocab: PathBuf,
}

/// The labeling rule: positive iff the phrase's concept code appears among
/// the image's object codes. Codes are read back from the feature vectors
/// by argmax, so this doubles as an oracle over the emitted files.
pub fn rule_label(phrase: &str, record: &ImageRecord, concepts: &[String]) -> Option<u8> {
    let concept_idx = phrase
        .split_whitespace()
        .find_map(|w| concepts.iter().position(|c| c == w))?;
    let member = record
        .objects
        .iter()
        .any(|obj| decode_code(&obj.feat) == concept_idx);
    Some(u8::from(member))
}

/// Recover an object's code as the argmax feature component.
pub fn decode_code(feat: &[f64]) -> usize {
    feat.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite features"))
        .map(|(i, _)| i)
        .expect("non-empty feature vector")
}

/// Generate a reproducible corpus: labels follow the rule exactly and
/// positives/negatives alternate (balanced within one pair).
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_codes = spec.concepts.len();

    // Images: each object carries a code embedded one-hot plus jitter.
    let mut features = Vec::with_capacity(spec.n_images);
    let mut image_codes: Vec<Vec<usize>> = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let n_objects = rng.gen_range(1..=spec.max_objects);
        let mut objects = Vec::with_capacity(n_objects);
        let mut codes = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let code = rng.gen_range(0..n_codes);
            codes.push(code);
            objects.push(DetectedObject {
                bbox: random_box(&mut rng),
                feat: (0..spec.d_feat)
                    .map(|j| {
                        let base = if j == code { CODE_SCALE } else { 0.0 };
                        base + JITTER_SCALE * rng.gen_range(-1.0..1.0)
                    })
                    .collect(),
            });
        }
        features.push(ImageRecord {
            image_id: format!("img{i:04}"),
            objects,
        });
        image_codes.push(codes);
    }

    let draw_pairs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledPair> {
        (0..n)
            .map(|i| {
                let target = (i % 2 == 0) as u8;
                loop {
                    let img = rng.gen_range(0..spec.n_images);
                    let codes = &image_codes[img];
                    let candidates: Vec<usize> = (0..n_codes)
                        .filter(|c| codes.contains(c) == (target == 1))
                        .collect();
                    let Some(&concept) = candidates.choose(rng) else {
                        continue; // image covers all/none of the codes; redraw
                    };
                    let concept_word = &spec.concepts[concept];
                    let phrase = match rng.gen_range(0..3) {
                        0 => concept_word.clone(),
                        1 => format!("{} {}", concept_word, pick(&spec.fillers, rng)),
                        _ => format!("{} {}", pick(&spec.fillers, rng), concept_word),
                    };
                    return LabeledPair {
                        phrase,
                        image_id: features[img].image_id.clone(),
                        label: target,
                        app_id: Some(format!("app{img:04}")),
                    };
                }
            })
            .collect()
    };

    let train_pairs = draw_pairs(spec.n_train, &mut rng);
    let eval_pairs = draw_pairs(spec.n_eval, &mut rng);

    let mut pool_ids: Vec<String> = features.iter().map(|r| r.image_id.clone()).collect();
    pool_ids.shuffle(&mut rng);
    pool_ids.truncate(spec.pool_size);
    let pool = CandidatePool::new(pool_ids)?;

    Ok(SynthCorpus {
        features,
        train_pairs,
        eval_pairs,
        pool,
        vocab: spec.vocab_tokens(),
    })
}

fn pick<'a>(words: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    words.choose(rng).map_or("app", |w| w.as_str())
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x1 = rng.gen_range(0.0..0.5);
    let y1 = rng.gen_range(0.0..0.5);
    let x2 = rng.gen_range(x1 + 0.05..1.0);
    let y2 = rng.gen_range(y1 + 0.05..1.0);
    [x1, y1, x2, y2]
}

/// Write the corpus under `dir` as the standard file set.
pub fn write_corpus(corpus: &SynthCorpus, dir: impl AsRef<Path>) -> Result<CorpusPaths, DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let paths = CorpusPaths {
        features: dir.join("features.jsonl"),
        train_pairs: dir.join("train_pairs.jsonl"),
        eval_pairs: dir.join("eval_pairs.jsonl"),
        pool: dir.join("pool.json"),
        vocab: dir.join("vocab.txt"),
    };
    let store = FeatureStore::from_records(
        corpus.features.clone(),
        &super::FeatureLimits {
            n_obj: corpus
                .features
                .iter()
                .map(|r| r.objects.len())
                .max()
                .unwrap_or(1),
            d_feat: corpus
                .features
                .first()
                .and_then(|r| r.objects.first())
                .map_or(1, |o| o.feat.len()),
        },
    )?;
    store.write(&paths.features)?;
    write_pairs(&paths.train_pairs, &corpus.train_pairs)?;
    write_pairs(&paths.eval_pairs, &corpus.eval_pairs)?;
    write_pool(&paths.pool, &corpus.pool)?;
    std::fs::write(&paths.vocab, corpus.vocab.join("\n") + "\n").map_err(|e| DataError::Io {
        path: paths.vocab.display().to_string(),
        source: e,
    })?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_match_rule_oracle_exactly() {
        let spec = SynthSpec {
            n_train: 200,
            n_eval: 50,
            ..SynthSpec::default()
        };
        let corpus = synth_generate(&spec, 42).unwrap();
        let by_id: std::collections::HashMap<&str, &ImageRecord> = corpus
            .features
            .iter()
            .map(|r| (r.image_id.as_str(), r))
            .collect();
        for pair in corpus.train_pairs.iter().chain(&corpus.eval_pairs) {
            let rec = by_id[pair.image_id.as_str()];
            let want = rule_label(&pair.phrase, rec, &spec.concepts).expect("phrase has concept");
            assert_eq!(pair.label, want, "pair {pair:?}");
        }
    }

    #[test]
    fn classes_are_balanced_within_ten_percent() {
        let corpus = synth_generate(&SynthSpec::default(), 1).unwrap();
        let pos = corpus.train_pairs.iter().filter(|p| p.label == 1).count();
        let neg = corpus.train_pairs.len() - pos;
        let imbalance = (pos as f64 - neg as f64).abs() / corpus.train_pairs.len() as f64;
        assert!(imbalance <= 0.1, "pos {pos} / neg {neg}");
    }

    #[test]
    fn fixed_seed_gives_byte_identical_files() {
        let spec = SynthSpec {
            n_images: 16,
            n_train: 40,
            n_eval: 10,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = write_corpus(&synth_generate(&spec, 9).unwrap(), dir.path().join("a")).unwrap();
        let b = write_corpus(&synth_generate(&spec, 9).unwrap(), dir.path().join("b")).unwrap();
        for (pa, pb) in [
            (&a.features, &b.features),
            (&a.train_pairs, &b.train_pairs),
            (&a.eval_pairs, &b.eval_pairs),
            (&a.pool, &b.pool),
            (&a.vocab, &b.vocab),
        ] {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
        // And a different seed actually changes the corpus.
        let c = write_corpus(&synth_generate(&spec, 10).unwrap(), dir.path().join("c")).unwrap();
        assert_ne!(
            std::fs::read(&a.train_pairs).unwrap(),
            std::fs::read(&c.train_pairs).unwrap()
        );
    }

    #[test]
    fn pool_query_matches_rule_subset() {
        let spec = SynthSpec::default();
        let corpus = synth_generate(&spec, 3).unwrap();
        let by_id: std::collections::HashMap<&str, &ImageRecord> = corpus
            .features
            .iter()
            .map(|r| (r.image_id.as_str(), r))
            .collect();
        let phrase = format!("{} game", spec.concepts[0]);
        let rule_positives: Vec<&str> = corpus
            .pool
            .image_ids
            .iter()
            .filter(|id| rule_label(&phrase, by_id[id.as_str()], &spec.concepts) == Some(1))
            .map(String::as_str)
            .collect();
        // Independent re-derivation: membership computed from raw codes.
        let expect: Vec<&str> = corpus
            .pool
            .image_ids
            .iter()
            .filter(|id| {
                by_id[id.as_str()]
                    .objects
                    .iter()
                    .any(|o| decode_code(&o.feat) == 0)
            })
            .map(String::as_str)
            .collect();
        assert_eq!(rule_positives, expect);
        assert_eq!(corpus.pool.image_ids.len(), spec.pool_size);
    }

    #[test]
    fn generated_files_pass_ingestion_validation() {
        let spec = SynthSpec::default();
        let corpus = synth_generate(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(&corpus, dir.path()).unwrap();
        let limits = super::super::FeatureLimits {
            n_obj: spec.max_objects,
            d_feat: spec.d_feat,
        };
        let store = FeatureStore::load(&paths.features, &limits).unwrap();
        assert_eq!(store.len(), spec.n_images);
        let train = super::super::load_pairs(&paths.train_pairs).unwrap();
        assert_eq!(train.len(), spec.n_train);
        let pool = super::super::load_pool(&paths.pool).unwrap();
        assert_eq!(pool.image_ids.len(), spec.pool_size);
        let vocab = crate::tokenizer::Vocabulary::load(&paths.vocab).unwrap();
        assert_eq!(vocab.len(), corpus.vocab.len());
    }

    #[test]
    fn spec_validation_rejects_unlearnable_setups() {
        let mut spec = SynthSpec::default();
        spec.concepts.truncate(1);
        assert!(synth_generate(&spec, 0).is_err());
        let mut spec = SynthSpec::default();
        spec.d_feat = 4; // fewer dims than concepts
        assert!(synth_generate(&spec, 0).is_err());
        let mut spec = SynthSpec::default();
        spec.max_objects = 8; // an image could contain every code
        assert!(synth_generate(&spec, 0).is_err());
    }
}
