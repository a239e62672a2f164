//! Binary layout: `"ATGN"`, format version (u32 LE), manifest length
//! (u64 LE), JSON manifest, then every parameter as little-endian f32 in
//! declaration order. The manifest carries a SHA-256 over the version, the
//! manifest itself (with an empty digest field) and the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Cnn, Model, ModelConfig, ModelError, Params, Vit};
use crate::data::LabelCodec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATGN";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("schema fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind {
        expected: &'static str,
        found: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    schema_fingerprint: String,
    codec: LabelCodec,
    params: Vec<ParamEntry>,
    sha256: String,
}

/// A loaded model with the label codec it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub codec: LabelCodec,
    /// Hex SHA-256 recorded in the manifest.
    pub digest: String,
}

impl Checkpoint {
    /// Short identifier derived from the content digest.
    pub fn id(&self) -> &str {
        &self.digest[..16]
    }

    pub fn into_cnn(self) -> Result<(Cnn, LabelCodec), CheckpointError> {
        match self.model {
            Model::Cnn(m) => Ok((m, self.codec)),
            Model::Vit(_) => Err(CheckpointError::Kind {
                expected: "cnn",
                found: "vit",
            }),
        }
    }

    pub fn into_vit(self) -> Result<(Vit, LabelCodec), CheckpointError> {
        match self.model {
            Model::Vit(m) => Ok((m, self.codec)),
            Model::Cnn(_) => Err(CheckpointError::Kind {
                expected: "vit",
                found: "cnn",
            }),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest(manifest: &Manifest, payload: &[u8]) -> String {
    let unsigned = Manifest {
        sha256: String::new(),
        config: manifest.config.clone(),
        schema_fingerprint: manifest.schema_fingerprint.clone(),
        codec: manifest.codec.clone(),
        params: manifest
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let mut hasher = Sha256::new();
    hasher.update(FORMAT_VERSION.to_le_bytes());
    hasher.update(serde_json::to_vec(&unsigned).expect("manifest serializes"));
    hasher.update(payload);
    hex(&hasher.finalize())
}

pub fn encode_checkpoint(model: &Model, codec: &LabelCodec) -> Vec<u8> {
    let params = model.params();
    let mut payload = Vec::with_capacity(params.numel() * 4);
    for (_, t) in params.iter() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut manifest = Manifest {
        config: model.config(),
        schema_fingerprint: codec.fingerprint(),
        codec: codec.clone(),
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        sha256: String::new(),
    };
    manifest.sha256 = digest(&manifest, &payload);
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated {
            expected: PREAMBLE,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let manifest_end = usize::try_from(manifest_len)
        .ok()
        .and_then(|l| l.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or(CheckpointError::Truncated {
            expected: PREAMBLE.saturating_add(manifest_len as usize),
            found: bytes.len(),
        })?;
    let raw = &bytes[PREAMBLE..manifest_end];
    let manifest: Manifest =
        serde_json::from_slice(raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if serde_json::to_vec(&manifest).expect("manifest serializes") != raw {
        return Err(CheckpointError::Integrity(
            "manifest is not in canonical form".into(),
        ));
    }

    let expected_payload: usize = manifest
        .params
        .iter()
        .map(|p| 4 * p.shape.iter().product::<usize>())
        .sum();
    let payload = &bytes[manifest_end..];
    if payload.len() < expected_payload {
        return Err(CheckpointError::Truncated {
            expected: manifest_end + expected_payload,
            found: bytes.len(),
        });
    }
    if payload.len() > expected_payload {
        return Err(CheckpointError::Integrity(format!(
            "{} trailing bytes after payload",
            payload.len() - expected_payload
        )));
    }
    if digest(&manifest, payload) != manifest.sha256 {
        return Err(CheckpointError::Integrity("content digest mismatch".into()));
    }
    if manifest.codec.fingerprint() != manifest.schema_fingerprint {
        return Err(CheckpointError::Integrity(
            "codec does not match its fingerprint".into(),
        ));
    }

    let mut model = match &manifest.config {
        ModelConfig::Cnn(c) => Model::Cnn(Cnn::new(c.clone(), 0)?),
        ModelConfig::Vit(c) => Model::Vit(Vit::new(c.clone(), 0)?),
    };
    fill(model.params_mut(), &manifest.params, payload)?;
    Ok(Checkpoint {
        model,
        codec: manifest.codec,
        digest: manifest.sha256,
    })
}

fn fill(
    params: &mut Params,
    entries: &[ParamEntry],
    payload: &[u8],
) -> Result<(), CheckpointError> {
    if params.len() != entries.len() {
        return Err(CheckpointError::Manifest(format!(
            "{} parameters listed, architecture declares {}",
            entries.len(),
            params.len()
        )));
    }
    let mut offset = 0;
    for ((name, tensor), entry) in params.iter_mut().zip(entries) {
        if name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Manifest(format!(
                "parameter {} {:?} does not match architecture {name} {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let n = tensor.numel();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *tensor = Tensor::new(entry.shape.clone(), data).expect("shape checked");
        offset += 4 * n;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    codec: &LabelCodec,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(model, codec)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires its schema fingerprint to equal
/// `fingerprint`.
pub fn load_checkpoint_for(path: &Path, fingerprint: &str) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.codec.fingerprint();
    if found != fingerprint {
        return Err(CheckpointError::Fingerprint {
            expected: fingerprint.to_string(),
            found,
        });
    }
    Ok(ckpt)
}
