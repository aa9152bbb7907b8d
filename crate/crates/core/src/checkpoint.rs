//! Bit-exact binary checkpoint format.
//!
//! Layout, all little-endian:
//!   magic `XMCK` (4 bytes) | version u32 | model-kind tag u8 |
//!   config blob (u32 length + UTF-8 JSON) | entry count u32 |
//!   entries: name (u32 length + UTF-8), rank u8, dims (u32 each),
//!   values (IEEE-754 f64 each).
//!
//! Values are always stored as 64-bit floats, so an `f64` store round-trips
//! bit-exactly. The load path doubles as the import hook for externally
//! converted pre-trained weights.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, OptimConfig};
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"XMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown model-kind tag {0}")]
    BadKindTag(u8),
    #[error("model kind mismatch: checkpoint holds `{found}`, config wants `{expected}`")]
    KindMismatch {
        expected: ModelKind,
        found: ModelKind,
    },
    #[error("parameter set mismatch at `{0}`")]
    NameMismatch(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed header JSON: {0}")]
    BadHeader(String),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Config subset carried inside the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serialize every parameter of the store, in registration order.
pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    header: &CheckpointHeader,
    store: &ParamStore<T>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| io_err(path, e));

    write(&MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&[header.kind.tag()])?;
    let blob = serde_json::to_vec(header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    write(&(blob.len() as u32).to_le_bytes())?;
    write(&blob)?;
    write(&(store.len() as u32).to_le_bytes())?;
    for (_, param) in store.iter() {
        let name = param.name.as_bytes();
        write(&(name.len() as u32).to_le_bytes())?;
        write(name)?;
        write(&[param.value.rank() as u8])?;
        for &dim in param.value.shape() {
            write(&(dim as u32).to_le_bytes())?;
        }
        for &v in param.value.data() {
            write(&v.to_f64().expect("scalar fits f64").to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Parse a checkpoint into its header and named tensors.
pub fn load(
    path: impl AsRef<Path>,
) -> Result<(CheckpointHeader, Vec<(String, Tensor<f64>)>), CheckpointError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut input = BufReader::new(file);

    let corrupt = |what: &str| CheckpointError::Corrupt(what.to_string());
    let mut read_exact = |buf: &mut [u8], what: &str| {
        input
            .read_exact(buf)
            .map_err(|_| CheckpointError::Corrupt(what.to_string()))
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut tag = [0u8; 1];
    read_exact(&mut tag, "model kind")?;
    let kind = ModelKind::from_tag(tag[0]).ok_or(CheckpointError::BadKindTag(tag[0]))?;

    read_exact(&mut u32buf, "header length")?;
    let mut blob = vec![0u8; u32::from_le_bytes(u32buf) as usize];
    read_exact(&mut blob, "header blob")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&blob).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.kind != kind {
        return Err(corrupt("header kind disagrees with binary tag"));
    }

    read_exact(&mut u32buf, "entry count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut u32buf, "name length")?;
        let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        read_exact(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name not UTF-8"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            read_exact(&mut u32buf, "dim")?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut f64buf, "tensor data")?;
            data.push(f64::from_le_bytes(f64buf));
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        entries.push((name, tensor));
    }
    // Trailing bytes mean the file is not what we wrote.
    let mut extra = [0u8; 1];
    if input.read(&mut extra).map_err(|e| io_err(path, e))? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok((header, entries))
}

/// Install loaded tensors into a model store. The name sets must match
/// exactly; the first mismatched name is reported.
pub fn apply<T: Scalar>(
    store: &mut ParamStore<T>,
    entries: &[(String, Tensor<f64>)],
) -> Result<(), CheckpointError> {
    let by_name: std::collections::HashMap<&str, &Tensor<f64>> = entries
        .iter()
        .map(|(name, tensor)| (name.as_str(), tensor))
        .collect();
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        let name = store.get(*id).name.clone();
        let Some(tensor) = by_name.get(name.as_str()) else {
            return Err(CheckpointError::NameMismatch(name));
        };
        if tensor.shape() != store.value(*id).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: store.value(*id).shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
    }
    for (name, _) in entries {
        if store.id_of(name).is_none() {
            return Err(CheckpointError::NameMismatch(name.clone()));
        }
    }
    for id in ids {
        let name = store.get(id).name.clone();
        let tensor = by_name[name.as_str()];
        let converted = Tensor::from_vec(
            tensor.shape().to_vec(),
            tensor.data().iter().map(|&v| T::cast(v)).collect(),
        )
        .expect("validated shape");
        *store.value_mut(id) = converted;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header() -> CheckpointHeader {
        CheckpointHeader {
            kind: ModelKind::Cross,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
        }
    }

    fn random_store(seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for i in 0..5 {
            let shape = vec![rng.gen_range(1..4), rng.gen_range(1..5)];
            let t = crate::numerics::gaussian_tensor(&mut rng, shape, 1.0);
            store.register(&format!("layer.{i}.weight"), t).unwrap();
        }
        // Values that expose any lossy encoding.
        store
            .register(
                "awkward",
                Tensor::from_vec(
                    vec![4],
                    vec![0.1 + 0.2, f64::MIN_POSITIVE, -0.0, 1.0 / 3.0],
                )
                .unwrap(),
            )
            .unwrap();
        store
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = random_store(1);
        save(&path, &header(), &store).unwrap();
        let (loaded_header, entries) = load(&path).unwrap();
        assert_eq!(loaded_header, header());
        assert_eq!(entries.len(), store.len());
        for ((name, tensor), (_, param)) in entries.iter().zip(store.iter()) {
            assert_eq!(name, &param.name);
            assert_eq!(tensor.shape(), param.value.shape());
            for (a, b) in tensor.data().iter().zip(param.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // Applying onto a same-shaped store reproduces the values.
        let mut target = store.clone();
        for id in target.ids().collect::<Vec<_>>() {
            target.value_mut(id).fill(0.0);
        }
        apply(&mut target, &entries).unwrap();
        for ((_, a), (_, b)) in target.iter().zip(store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn apply_names_first_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = random_store(1);
        save(&path, &header(), &store).unwrap();
        let (_, entries) = load(&path).unwrap();

        let mut renamed = ParamStore::<f64>::new();
        for (i, (_, p)) in store.iter().enumerate() {
            let name = if i == 2 { "layer.2.kernel" } else { &p.name };
            renamed.register(name, p.value.clone()).unwrap();
        }
        let err = apply(&mut renamed, &entries).unwrap_err();
        assert!(
            matches!(&err, CheckpointError::NameMismatch(n) if n == "layer.2.kernel"),
            "{err}"
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = random_store(3);
        save(&path, &header(), &store).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt(_))));

        let mut extended = bytes.clone();
        extended.push(0);
        std::fs::write(&path, &extended).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt(_))));

        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        std::fs::write(&path, &wrong_version).unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }
}
