//! Checkpoints: a little-endian `f32` blob (`<stem>.bin`) and a JSON
//! manifest (`<stem>.json`) describing the tensors inside it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{build_network, FusionNet};
use super::spec::{FusionSpec, Hyperparams};
use super::train::TrainingSummary;
use super::transfer::TransferAudit;
use crate::error::{Error, Result};
use crate::json::{read_json, write_json};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset and length in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentRef {
    pub role: String,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub id: String,
    pub network_id: String,
    pub spec: FusionSpec,
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub parents: Vec<ParentRef>,
    pub training: Option<TrainingSummary>,
    pub transfer: Option<TransferAudit>,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub net: FusionNet<f32>,
}

fn blob(net: &FusionNet<f32>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in net.params() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    (bytes, entries)
}

/// First 16 hex digits of the SHA-256 of the weights and the spec.
fn content_id(bytes: &[u8], spec: &FusionSpec) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.update(serde_json::to_vec(spec).expect("spec serialises"));
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

impl Checkpoint {
    pub fn new(
        net: FusionNet<f32>,
        parents: Vec<ParentRef>,
        training: Option<TrainingSummary>,
        transfer: Option<TransferAudit>,
    ) -> Self {
        let (bytes, tensors) = blob(&net);
        let spec = net.spec.clone();
        let manifest = CheckpointManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            id: content_id(&bytes, &spec),
            network_id: spec.id(),
            tensors,
            seed: spec.hyperparams.seed,
            hyperparams: spec.hyperparams.clone(),
            spec,
            parents,
            training,
            transfer,
            tool_version: crate::VERSION.to_string(),
        };
        Self { manifest, net }
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, json) = paths(stem);
        if let Some(dir) = bin.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&bin, blob(&self.net).0).map_err(|e| Error::io(&bin, e))?;
        write_json(&json, &self.manifest)
    }

    pub fn exists(stem: &Path) -> bool {
        let (bin, json) = paths(stem);
        bin.exists() && json.exists()
    }

    /// Loads and verifies tensor names, shapes and the content id.
    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, json) = paths(stem);
        if !bin.exists() || !json.exists() {
            return Err(Error::MissingCheckpoint(stem.display().to_string()));
        }
        let manifest: CheckpointManifest = read_json(&json)?;
        if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported schema version {}",
                json.display(),
                manifest.schema_version
            )));
        }
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("{}: length not a multiple of 4", bin.display())));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut net = build_network::<f32>(&manifest.spec)?;
        {
            let mut params = net.params_mut();
            if params.len() != manifest.tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: {} tensors listed, network has {}",
                    json.display(),
                    manifest.tensors.len(),
                    params.len()
                )));
            }
            for (p, e) in params.iter_mut().zip(&manifest.tensors) {
                if p.name != e.name || p.value.shape() != e.shape.as_slice() || e.offset + e.len > values.len() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{}` {:?} does not match network parameter `{}` {:?}",
                        e.name,
                        e.shape,
                        p.name,
                        p.value.shape()
                    )));
                }
                *p.value = Tensor::from_vec(&e.shape, values[e.offset..e.offset + e.len].to_vec())?;
            }
        }
        let id = content_id(&bytes, &manifest.spec);
        if id != manifest.id {
            return Err(Error::Checkpoint(format!(
                "{}: content id {id} does not match manifest id {}",
                stem.display(),
                manifest.id
            )));
        }
        Ok(Self { manifest, net })
    }
}
