//! Model checkpoints: a little-endian `f64` parameter blob (`model.bin`) and
//! a JSON sidecar (`manifest.json`) with architecture, config, seed and the
//! metric history.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nettrain::EpochMetrics;
use crate::nn::{Architecture, Model};

pub const BLOB_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"SPMX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub checkpoint_id: String,
    pub stage: String,
    pub architecture: Architecture,
    pub seed: u64,
    pub epoch: usize,
    pub parameter_count: usize,
    pub config: serde_json::Value,
    pub metrics: Vec<EpochMetrics>,
}

pub fn encode_parameters(model: &Model) -> Vec<u8> {
    let n = model.num_parameters();
    let mut out = Vec::with_capacity(16 + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for (_, t) in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_parameters(arch: &Architecture, bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a parameter blob"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad("unsupported blob version"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let mut model = Model::zeros(arch);
    if n != model.num_parameters() || bytes.len() != 16 + 8 * n {
        return Err(bad("parameter count does not match the architecture"));
    }
    let mut values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(model)
}

/// Short content hash of a parameter blob.
pub fn checkpoint_id(blob: &[u8]) -> String {
    let digest = Sha256::digest(blob);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(
    dir: &Path,
    model: &Model,
    stage: &str,
    config: &impl Serialize,
    seed: u64,
    metrics: &[EpochMetrics],
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let blob = encode_parameters(model);
    let manifest = CheckpointManifest {
        checkpoint_id: checkpoint_id(&blob),
        stage: stage.to_string(),
        architecture: model.arch.clone(),
        seed,
        epoch: metrics.len(),
        parameter_count: model.num_parameters(),
        config: serde_json::to_value(config)?,
        metrics: metrics.to_vec(),
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let read = |name: &str| {
        fs::read(dir.join(name)).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let manifest: CheckpointManifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
        .map_err(|e| Error::Checkpoint(format!("invalid manifest: {e}")))?;
    let blob = read(BLOB_FILE)?;
    if checkpoint_id(&blob) != manifest.checkpoint_id {
        return Err(Error::Checkpoint("parameter blob does not match its manifest".into()));
    }
    let model = decode_parameters(&manifest.architecture, &blob)?;
    Ok((model, manifest))
}
