//! Model checkpoints (magic `DANHAR01`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, BlobWriter, Dtype, ManifestEntry, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DANHAR01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

/// Storage encoding for parameter blobs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

pub fn encode(model: &Model, precision: Precision) -> (CheckpointHeader, Vec<u8>) {
    let dtype = match precision {
        Precision::F64 => Dtype::F64,
        Precision::F32 => Dtype::F32,
    };
    let mut w = BlobWriter::default();
    for (name, t) in model.state() {
        w.push_tensor(&name, &t, dtype);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        manifest: w.manifest,
    };
    (header, w.bytes)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    save_checkpoint_with(model, path, Precision::F64)
}

pub fn save_checkpoint_with(model: &Model, path: &Path, precision: Precision) -> Result<()> {
    let (header, blobs) = encode(model, precision);
    container::write(path, MAGIC, &header, &blobs)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let c: container::Container<CheckpointHeader> = container::read(path, MAGIC)
        .map_err(|e| e.context(format!("loading checkpoint {}", path.display())))?;
    decode(c.header, &c.blobs).map_err(|e| e.context(format!("loading checkpoint {}", path.display())))
}

pub fn decode(header: CheckpointHeader, blobs: &[u8]) -> Result<Model> {
    let mut model = Model::build(header.config)?;
    let expected = model.state();
    if expected.len() != header.manifest.len() {
        return Err(Error::Manifest(format!(
            "config implies {} tensors, manifest lists {}",
            expected.len(),
            header.manifest.len()
        )));
    }
    let mut state = Vec::with_capacity(expected.len());
    for ((name, t), entry) in expected.iter().zip(&header.manifest) {
        if entry.name() != name || entry.shape() != t.shape() {
            return Err(Error::Manifest(format!(
                "expected {name} {:?}, manifest has {} {:?}",
                t.shape(),
                entry.name(),
                entry.shape()
            )));
        }
        if entry.dtype() == Dtype::U32 {
            return Err(Error::Manifest(format!("{name} has integer dtype")));
        }
        state.push((name.clone(), container::decode_tensor(blobs, entry)?));
    }
    model.load_state(state)?;
    Ok(model)
}
