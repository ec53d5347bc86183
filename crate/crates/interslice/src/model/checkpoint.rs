//! Checkpoint serialization.
//!
//! Layout: magic `INNC`, format version (u32 LE), header length (u32 LE), a
//! UTF-8 JSON header, then raw little-endian f32 tensor payloads. The header
//! carries the architecture, a tensor index sorted by name with byte offsets
//! relative to the payload start, a payload checksum, and (for resumable
//! checkpoints) optimizer state and the resolved training config.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Arch, BaselineModel, DenoiserModel, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"INNC";
pub const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainStateHeader {
    iteration: u64,
    /// ChaCha word position of the batch stream, decimal (u128 is not JSON-safe).
    rng_word_pos: String,
    loss_f: f64,
    loss_r: f64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    arch: String,
    channels: usize,
    blocks: usize,
    r: usize,
    s_max: f64,
    #[serde(default = "default_growth")]
    growth: usize,
    tensor_index: Vec<IndexEntry>,
    payload_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<TrainStateHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

fn default_growth() -> usize {
    32
}

/// Optimizer state and provenance stored alongside the weights so a resumed
/// run is bit-compatible with an uninterrupted one.
#[derive(Clone, Debug, Default)]
pub struct TrainSnapshot {
    pub iteration: u64,
    pub rng_word_pos: u128,
    /// First and second Adam moments, keyed by parameter name.
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    /// Resolved training config echoed for provenance.
    pub config_json: Option<serde_json::Value>,
    pub loss_f: f64,
    pub loss_r: f64,
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle<f32>, train: Option<&TrainSnapshot>) -> Result<()> {
    let cfg = bundle.config();

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    bundle.visit_params(&mut |name, t| {
        tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    if let Some(snap) = train {
        for (name, (m, v)) in &snap.moments {
            tensors.push((format!("adam.m.{name}"), vec![m.len()], m.clone()));
            tensors.push((format!("adam.v.{name}"), vec![v.len()], v.clone()));
        }
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));

    let mut index = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, shape, data) in &tensors {
        index.push(IndexEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".to_string(),
            byte_offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let header = Header {
        arch: bundle.arch().to_string(),
        channels: cfg.channels,
        blocks: cfg.blocks,
        r: cfg.shuffle_r,
        s_max: cfg.s_max,
        growth: cfg.growth,
        tensor_index: index,
        payload_sha256: hex(&Sha256::digest(&payload)),
        train_state: train.map(|s| TrainStateHeader {
            iteration: s.iteration,
            rng_word_pos: s.rng_word_pos.to_string(),
            loss_f: s.loss_f,
            loss_r: s.loss_r,
        }),
        config: train.and_then(|s| s.config_json.clone()),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::HeaderInvalid { path: path.to_path_buf(), detail: e.to_string() })?;

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle<f32>, Option<TrainSnapshot>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), found: magic, expected: MAGIC });
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::BadVersion { path: path.to_path_buf(), found: version, supported: VERSION });
    }
    file.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::HeaderInvalid { path: path.to_path_buf(), detail: e.to_string() })?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;

    let expected: u64 = header
        .tensor_index
        .iter()
        .map(|e| {
            let numel: usize = e.shape.iter().product();
            e.byte_offset + 4 * numel as u64
        })
        .max()
        .unwrap_or(0);
    if payload.len() as u64 != expected {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected,
            got: payload.len() as u64,
        });
    }
    if hex(&Sha256::digest(&payload)) != header.payload_sha256 {
        return Err(Error::HeaderInvalid {
            path: path.to_path_buf(),
            detail: "payload checksum mismatch (corrupted tensor data)".to_string(),
        });
    }

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for entry in &header.tensor_index {
        if entry.dtype != "f32" {
            return Err(Error::HeaderInvalid {
                path: path.to_path_buf(),
                detail: format!("tensor {} has unsupported dtype {}", entry.name, entry.dtype),
            });
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b: [u8; 4] = payload[start + 4 * i..start + 4 * i + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(b));
        }
        tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }

    let arch: Arch = header.arch.parse()?;
    let cfg = ModelConfig {
        channels: header.channels,
        blocks: header.blocks,
        shuffle_r: header.r,
        s_max: header.s_max,
        growth: header.growth,
    };
    // Construct the right skeleton, then overwrite every parameter by name.
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    let mut bundle: ModelBundle<f32> = match arch {
        Arch::M3 => ModelBundle::M3(DenoiserModel::new(cfg.clone(), &mut rng)?),
        Arch::M1 => {
            let target = DenoiserModel::<f32>::param_count(&cfg);
            ModelBundle::M1(BaselineModel::matched(&cfg, target, &mut rng)?)
        }
        Arch::M2 => {
            let target = DenoiserModel::<f32>::param_count(&cfg);
            ModelBundle::M2 {
                fwd: BaselineModel::matched(&cfg, target, &mut rng)?,
                rev: BaselineModel::matched(&cfg, target, &mut rng)?,
            }
        }
    };
    let mut missing = Vec::new();
    bundle.visit_params_mut(&mut |name, t| match tensors.get(name) {
        Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
        Some(loaded) => missing.push(format!("{name}: shape {:?} != expected {:?}", loaded.shape(), t.shape())),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(Error::CheckpointMismatch { detail: missing.join("; ") });
    }

    let train = header.train_state.map(|ts| -> Result<TrainSnapshot> {
        let mut moments = BTreeMap::new();
        for (name, t) in &tensors {
            if let Some(base) = name.strip_prefix("adam.m.") {
                let v = tensors
                    .get(&format!("adam.v.{base}"))
                    .ok_or_else(|| Error::CheckpointMismatch {
                        detail: format!("adam.v.{base} missing while adam.m.{base} present"),
                    })?;
                moments.insert(base.to_string(), (t.data().to_vec(), v.data().to_vec()));
            }
        }
        Ok(TrainSnapshot {
            iteration: ts.iteration,
            rng_word_pos: ts.rng_word_pos.parse().map_err(|_| Error::HeaderInvalid {
                path: path.to_path_buf(),
                detail: format!("rng_word_pos {:?} is not an integer", ts.rng_word_pos),
            })?,
            moments,
            config_json: header.config.clone(),
            loss_f: ts.loss_f,
            loss_r: ts.loss_r,
        })
    });
    let train = match train {
        Some(r) => Some(r?),
        None => None,
    };

    Ok((bundle, train))
}

/// Short content hash identifying a checkpoint file in reports.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes))[..12].to_string())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_bundle(seed: u64) -> ModelBundle<f32> {
        let cfg = ModelConfig { channels: 4, blocks: 2, shuffle_r: 2, s_max: 2.0, growth: 8 };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        super::super::build_model(Arch::M3, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.innc");
        let bundle = tiny_bundle(4);
        save_checkpoint(&path, &bundle, None).unwrap();
        let (loaded, train) = load_checkpoint(&path).unwrap();
        assert!(train.is_none());
        let mut orig = Vec::new();
        bundle.visit_params(&mut |n, t| orig.push((n.to_string(), t.data().to_vec())));
        let mut back = Vec::new();
        loaded.visit_params(&mut |n, t| back.push((n.to_string(), t.data().to_vec())));
        assert_eq!(orig, back);

        // Saving the loaded bundle again reproduces the file byte for byte.
        let path2 = dir.path().join("m2.innc");
        save_checkpoint(&path2, &loaded, None).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_version_and_payload_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.innc");
        save_checkpoint(&path, &tiny_bundle(5), None).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadVersion { .. })));

        let mut bad = good.clone();
        let n = bad.len();
        bad.truncate(n - 17);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::PayloadSizeMismatch { .. })));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 10] ^= 0x5a;
        std::fs::write(&path, &bad).unwrap();
        match load_checkpoint(&path) {
            Err(Error::HeaderInvalid { detail, .. }) => assert!(detail.contains("checksum")),
            other => panic!("payload corruption must fail loudly, got {other:?}"),
        }
    }

    #[test]
    fn train_snapshot_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.innc");
        let bundle = tiny_bundle(6);
        let mut moments = BTreeMap::new();
        bundle.visit_params(&mut |n, t| {
            moments.insert(n.to_string(), (vec![0.5f32; t.numel()], vec![0.25f32; t.numel()]));
        });
        let snap = TrainSnapshot {
            iteration: 1234,
            rng_word_pos: 77_000_000_000_000_000_000u128,
            moments,
            config_json: Some(serde_json::json!({"seed": 9})),
            loss_f: 0.5,
            loss_r: 0.1,
        };
        save_checkpoint(&path, &bundle, Some(&snap)).unwrap();
        let (_, back) = load_checkpoint(&path).unwrap();
        let back = back.expect("train state");
        assert_eq!(back.iteration, 1234);
        assert_eq!(back.rng_word_pos, snap.rng_word_pos);
        assert_eq!(back.moments.len(), snap.moments.len());
        assert_eq!(back.config_json, snap.config_json);
    }
}
