//! Ingestion and validation of precomputed object features, labeled
//! phrase/image pairs, and candidate pools, plus batching and the
//! synthetic corpus generator.
//!
//! All dataset files are JSONL/JSON with 64-bit floats; `serde_json`
//! round-trips them bit-exactly.

pub mod synth;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Invalid {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("candidate pool must not be empty")]
    EmptyPool,
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("image `{id}` has {got} objects, limit is {limit}")]
    TooManyObjects { id: String, got: usize, limit: usize },
    #[error("synthetic spec invalid: {0}")]
    BadSynthSpec(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Bounds every ingested image record must satisfy. Defaults are the full
/// production shape; desk-scale tests use (4, 8).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLimits {
    pub n_obj: usize,
    pub d_feat: usize,
}

impl Default for FeatureLimits {
    fn default() -> Self {
        Self {
            n_obj: 36,
            d_feat: 2048,
        }
    }
}

/// One detected object: a normalized box and its feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub feat: Vec<f64>,
}

/// An image represented by its detected objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub objects: Vec<DetectedObject>,
}

impl ImageRecord {
    fn validate(&self, limits: &FeatureLimits) -> Result<(), String> {
        if self.objects.is_empty() {
            return Err(format!("image `{}` has no objects", self.image_id));
        }
        if self.objects.len() > limits.n_obj {
            return Err(format!(
                "image `{}` has {} objects, limit is {}",
                self.image_id,
                self.objects.len(),
                limits.n_obj
            ));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            let [x1, y1, x2, y2] = obj.bbox;
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(in_unit(x1) && in_unit(y1) && in_unit(x2) && in_unit(y2)) {
                return Err(format!(
                    "image `{}` object {i}: box {:?} outside [0,1]",
                    self.image_id, obj.bbox
                ));
            }
            if x1 >= x2 || y1 >= y2 {
                return Err(format!(
                    "image `{}` object {i}: degenerate box {:?} (need x1 < x2 and y1 < y2)",
                    self.image_id, obj.bbox
                ));
            }
            if obj.feat.len() != limits.d_feat {
                return Err(format!(
                    "image `{}` object {i}: feature length {} != {}",
                    self.image_id,
                    obj.feat.len(),
                    limits.d_feat
                ));
            }
            if obj.feat.iter().any(|v| !v.is_finite()) {
                return Err(format!(
                    "image `{}` object {i}: non-finite feature value",
                    self.image_id
                ));
            }
        }
        Ok(())
    }
}

/// A labeled (search phrase, image, label) training/eval record; `app_id`
/// groups the phrases a developer attached to one application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub phrase: String,
    pub image_id: String,
    pub label: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub app_id: Option<String>,
}

/// Distinct image ids a query selects over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub image_ids: Vec<String>,
}

impl CandidatePool {
    pub fn new(image_ids: Vec<String>) -> Result<Self, DataError> {
        if image_ids.is_empty() {
            return Err(DataError::EmptyPool);
        }
        let mut seen = std::collections::HashSet::new();
        for id in &image_ids {
            if !seen.insert(id.clone()) {
                return Err(DataError::Invalid {
                    path: "<pool>".into(),
                    line: 0,
                    msg: format!("duplicate image id `{id}` in pool"),
                });
            }
        }
        Ok(Self { image_ids })
    }
}

/// Validated image records in insertion order, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn from_records(
        records: Vec<ImageRecord>,
        limits: &FeatureLimits,
    ) -> Result<Self, DataError> {
        let mut store = Self::default();
        for (i, rec) in records.into_iter().enumerate() {
            store.insert(rec, limits).map_err(|msg| DataError::Invalid {
                path: "<memory>".into(),
                line: i + 1,
                msg,
            })?;
        }
        Ok(store)
    }

    fn insert(&mut self, rec: ImageRecord, limits: &FeatureLimits) -> Result<(), String> {
        rec.validate(limits)?;
        if self.index.contains_key(&rec.image_id) {
            return Err(format!("duplicate image id `{}`", rec.image_id));
        }
        self.index.insert(rec.image_id.clone(), self.records.len());
        self.records.push(rec);
        Ok(())
    }

    /// Load a `features.jsonl` file: one record per line, validated.
    /// Errors carry the offending line number.
    pub fn load(path: impl AsRef<Path>, limits: &FeatureLimits) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut store = Self::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord =
                serde_json::from_str(&line).map_err(|e| DataError::Invalid {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("malformed JSON: {e}"),
                })?;
            store.insert(rec, limits).map_err(|msg| DataError::Invalid {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            })?;
        }
        Ok(store)
    }

    /// Write as JSONL, one record per line, bit-exact round trip with
    /// [`FeatureStore::load`].
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| io_err(path, e))?,
        );
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec).map_err(|e| DataError::Invalid {
                path: path.display().to_string(),
                line: 0,
                msg: e.to_string(),
            })?;
            out.write_all(b"\n").map_err(|e| io_err(path, e))?;
        }
        out.flush().map_err(|e| io_err(path, e))?;
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Load a `pairs.jsonl` file, preserving order.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<LabeledPair>, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: LabeledPair = serde_json::from_str(&line).map_err(|e| DataError::Invalid {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("malformed JSON: {e}"),
        })?;
        if pair.label > 1 {
            return Err(DataError::Invalid {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("label must be 0 or 1, got {}", pair.label),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[LabeledPair]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    for pair in pairs {
        serde_json::to_writer(&mut out, pair).map_err(|e| DataError::Invalid {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        out.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Load a `pool.json` file.
pub fn load_pool(path: impl AsRef<Path>) -> Result<CandidatePool, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pool: CandidatePool = serde_json::from_str(&text).map_err(|e| DataError::Invalid {
        path: path.display().to_string(),
        line: 1,
        msg: format!("malformed JSON: {e}"),
    })?;
    CandidatePool::new(pool.image_ids)
}

pub fn write_pool(path: impl AsRef<Path>, pool: &CandidatePool) -> Result<(), DataError> {
    let path = path.as_ref();
    let text = serde_json::to_string(pool).expect("pool serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Zero-padded image batch with a validity mask. Padded object rows are
/// all-zero; each image keeps at least one valid object.
#[derive(Debug, Clone)]
pub struct PaddedImageBatch<T> {
    pub boxes: Tensor<T>,
    pub feats: Tensor<T>,
    pub obj_mask: Tensor<T>,
    n_obj: usize,
    d_feat: usize,
}

impl<T: Scalar> PaddedImageBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn n_obj(&self) -> usize {
        self.n_obj
    }

    /// Per-example view: `([n_obj, 4] boxes, [n_obj, d_feat] feats, mask)`.
    pub fn example(&self, i: usize) -> (Tensor<T>, Tensor<T>, Vec<bool>) {
        let n = self.n_obj;
        let boxes = Tensor::from_vec(
            vec![n, 4],
            self.boxes.data()[i * n * 4..(i + 1) * n * 4].to_vec(),
        )
        .expect("box slice");
        let feats = Tensor::from_vec(
            vec![n, self.d_feat],
            self.feats.data()[i * n * self.d_feat..(i + 1) * n * self.d_feat].to_vec(),
        )
        .expect("feat slice");
        let mask = self.obj_mask.data()[i * n..(i + 1) * n]
            .iter()
            .map(|&m| m == T::one())
            .collect();
        (boxes, feats, mask)
    }
}

/// Zero-pad records to `n_obj` objects each and build the validity mask.
pub fn pad_images<T: Scalar>(
    records: &[&ImageRecord],
    n_obj: usize,
) -> Result<PaddedImageBatch<T>, DataError> {
    let b = records.len();
    let d_feat = records
        .first()
        .and_then(|r| r.objects.first())
        .map_or(0, |o| o.feat.len());
    let mut boxes = Tensor::zeros(vec![b.max(1), n_obj, 4]);
    let mut feats = Tensor::zeros(vec![b.max(1), n_obj, d_feat.max(1)]);
    let mut mask = Tensor::zeros(vec![b.max(1), n_obj]);
    for (i, rec) in records.iter().enumerate() {
        if rec.objects.len() > n_obj {
            return Err(DataError::TooManyObjects {
                id: rec.image_id.clone(),
                got: rec.objects.len(),
                limit: n_obj,
            });
        }
        for (j, obj) in rec.objects.iter().enumerate() {
            for (k, &v) in obj.bbox.iter().enumerate() {
                boxes.data_mut()[(i * n_obj + j) * 4 + k] = T::cast(v);
            }
            for (k, &v) in obj.feat.iter().enumerate() {
                feats.data_mut()[(i * n_obj + j) * d_feat + k] = T::cast(v);
            }
            mask.data_mut()[i * n_obj + j] = T::one();
        }
    }
    Ok(PaddedImageBatch {
        boxes,
        feats,
        obj_mask: mask,
        n_obj,
        d_feat,
    })
}

/// Deterministically shuffle pairs under `seed` and split into batches;
/// the final short batch is kept. Every image id must resolve.
pub fn make_batches(
    pairs: &[LabeledPair],
    features: &FeatureStore,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<LabeledPair>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::EmptyBatch);
    }
    for pair in pairs {
        if features.get(&pair.image_id).is_none() {
            return Err(DataError::UnknownImage(pair.image_id.clone()));
        }
    }
    let mut shuffled: Vec<LabeledPair> = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    Ok(shuffled
        .chunks(batch_size)
        .map(<[LabeledPair]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_limits() -> FeatureLimits {
        FeatureLimits { n_obj: 4, d_feat: 8 }
    }

    fn record(id: &str, n: usize, d: usize) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            objects: (0..n)
                .map(|i| DetectedObject {
                    bbox: [0.1, 0.2, 0.5 + 0.01 * i as f64, 0.9],
                    feat: (0..d).map(|j| j as f64 * 0.25 - 1.0).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn accepts_full_production_shape() {
        // 36 objects x 2048-dim features.
        let limits = FeatureLimits::default();
        let rec = record("img0", 36, 2048);
        assert!(FeatureStore::from_records(vec![rec], &limits).is_ok());
    }

    #[test]
    fn rejects_inverted_box() {
        let mut rec = record("img0", 1, 8);
        rec.objects[0].bbox = [0.5, 0.2, 0.4, 0.9];
        let err = FeatureStore::from_records(vec![rec], &desk_limits()).unwrap_err();
        assert!(err.to_string().contains("degenerate box"), "{err}");
    }

    #[test]
    fn rejects_too_many_objects() {
        let limits = FeatureLimits {
            n_obj: 36,
            d_feat: 8,
        };
        let rec = record("img0", 37, 8);
        let err = FeatureStore::from_records(vec![rec], &limits).unwrap_err();
        assert!(err.to_string().contains("37 objects"), "{err}");
    }

    #[test]
    fn rejects_wrong_feature_length_and_duplicates() {
        let limits = desk_limits();
        let rec = record("img0", 1, 7);
        assert!(FeatureStore::from_records(vec![rec], &limits).is_err());
        let err = FeatureStore::from_records(
            vec![record("img0", 1, 8), record("img0", 1, 8)],
            &limits,
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate image id"), "{err}");
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.jsonl");
        let good = serde_json::to_string(&record("img0", 1, 8)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = FeatureStore::load(&path, &desk_limits()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn feature_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.jsonl");
        let mut rec = record("img0", 3, 8);
        // Awkward values that expose lossy float formatting.
        rec.objects[0].feat[0] = 0.1 + 0.2;
        rec.objects[0].feat[1] = 1.0 / 3.0;
        rec.objects[0].feat[2] = f64::MIN_POSITIVE;
        rec.objects[1].bbox = [0.123456789012345678, 0.2, 0.987654321098765432, 0.4];
        let store = FeatureStore::from_records(vec![rec], &desk_limits()).unwrap();
        store.write(&path).unwrap();
        let loaded = FeatureStore::load(&path, &desk_limits()).unwrap();
        assert_eq!(store.records(), loaded.records());
    }

    #[test]
    fn pairs_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        std::fs::write(
            &path,
            r#"{"phrase":"puzzle game","image_id":"img1","label":1}
{"phrase":"puzzle game","image_id":"img1","label":0,"app_id":"app7"}
"#,
        )
        .unwrap();
        let pairs = load_pairs(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].label, 1);
        assert_eq!(pairs[1].app_id.as_deref(), Some("app7"));

        std::fs::write(&path, r#"{"phrase":"x","image_id":"img1","label":2}"#).unwrap();
        let err = load_pairs(&path).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn one_image_many_phrases_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs: Vec<LabeledPair> = (0..5)
            .map(|i| LabeledPair {
                phrase: format!("phrase {i}"),
                image_id: "img1".into(),
                label: 1,
                app_id: Some("app1".into()),
            })
            .collect();
        write_pairs(&path, &pairs).unwrap();
        let loaded = load_pairs(&path).unwrap();
        assert_eq!(loaded, pairs);
    }

    #[test]
    fn pool_rejects_duplicates_and_empty() {
        assert!(CandidatePool::new(vec![]).is_err());
        assert!(CandidatePool::new(vec!["a".into(), "a".into()]).is_err());
        assert!(CandidatePool::new(vec!["a".into(), "b".into()]).is_ok());
    }

    #[test]
    fn pad_images_masks_and_zeroes() {
        let recs = [record("a", 2, 8), record("b", 4, 8)];
        let refs: Vec<&ImageRecord> = recs.iter().collect();
        let batch = pad_images::<f64>(&refs, 4).unwrap();
        assert_eq!(batch.obj_mask.data()[..4], [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(batch.obj_mask.data()[4..], [1.0, 1.0, 1.0, 1.0]);
        let (boxes, feats, mask) = batch.example(0);
        assert_eq!(mask, vec![true, true, false, false]);
        assert!(boxes.row(2).iter().all(|&v| v == 0.0));
        assert!(feats.row(3).iter().all(|&v| v == 0.0));

        let too_many = [record("c", 5, 8)];
        let refs: Vec<&ImageRecord> = too_many.iter().collect();
        assert!(pad_images::<f64>(&refs, 4).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_keep_tail() {
        let store =
            FeatureStore::from_records(vec![record("img0", 1, 8)], &desk_limits()).unwrap();
        let pairs: Vec<LabeledPair> = (0..10)
            .map(|i| LabeledPair {
                phrase: format!("p{i}"),
                image_id: "img0".into(),
                label: (i % 2) as u8,
                app_id: None,
            })
            .collect();
        let a = make_batches(&pairs, &store, 4, 7).unwrap();
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b = make_batches(&pairs, &store, 4, 7).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&pairs, &store, 4, 8).unwrap();
        assert_ne!(a, c, "different seeds should permute differently");

        let bad = vec![LabeledPair {
            phrase: "p".into(),
            image_id: "missing".into(),
            label: 0,
            app_id: None,
        }];
        assert!(matches!(
            make_batches(&bad, &store, 2, 0),
            Err(DataError::UnknownImage(_))
        ));
    }
}
