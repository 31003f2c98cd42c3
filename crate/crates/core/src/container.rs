//! Binary container shared by checkpoints and windowed archives.
//!
//! ```text
//! magic (8 bytes) | header length (u64 LE) | header (UTF-8 JSON) | blobs
//! ```
//!
//! The header carries a manifest of `[name, shape, dtype, offset]` entries;
//! offsets are relative to the first byte after the header. Blobs are
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    U32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 | Dtype::U32 => 4,
        }
    }
}

/// One manifest row, serialized as `[name, shape, dtype, offset]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry(pub String, pub Vec<usize>, pub Dtype, pub u64);

impl ManifestEntry {
    pub fn name(&self) -> &str {
        &self.0
    }

    pub fn shape(&self) -> &[usize] {
        &self.1
    }

    pub fn dtype(&self) -> Dtype {
        self.2
    }

    pub fn offset(&self) -> u64 {
        self.3
    }

    pub fn byte_len(&self) -> usize {
        self.1.iter().product::<usize>() * self.2.size()
    }
}

/// Accumulates blobs and their manifest.
#[derive(Debug, Default)]
pub struct BlobWriter {
    pub manifest: Vec<ManifestEntry>,
    pub bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn push(&mut self, name: &str, shape: &[usize], dtype: Dtype, values: &[f64]) {
        let offset = self.bytes.len() as u64;
        for &v in values {
            match dtype {
                Dtype::F64 => self.bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => self.bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::U32 => self.bytes.extend_from_slice(&(v as u32).to_le_bytes()),
            }
        }
        self.manifest.push(ManifestEntry(name.to_string(), shape.to_vec(), dtype, offset));
    }

    pub fn push_tensor(&mut self, name: &str, tensor: &Tensor, dtype: Dtype) {
        self.push(name, tensor.shape(), dtype, tensor.data());
    }
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, blobs: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(magic)?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(&header)?;
    file.write_all(blobs)?;
    file.flush()?;
    Ok(())
}

/// Parsed container: typed header plus the raw blob region.
#[derive(Debug)]
pub struct Container<H> {
    pub header: H,
    pub blobs: Vec<u8>,
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<Container<H>> {
    let bytes = fs::read(path)?;
    parse(&bytes, magic)
}

pub fn parse<H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 8]) -> Result<Container<H>> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("file is truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header is truncated".into()))?;
    let text = std::str::from_utf8(&bytes[16..end]).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64);
    match found {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::Format("header has no format_version".into())),
    }
    let header = serde_json::from_value(value)?;
    Ok(Container {
        header,
        blobs: bytes[end..].to_vec(),
    })
}

/// Decodes one blob into f64 values, checking bounds.
pub fn decode(blobs: &[u8], entry: &ManifestEntry) -> Result<Vec<f64>> {
    let start = entry.offset() as usize;
    let end = start
        .checked_add(entry.byte_len())
        .filter(|&e| e <= blobs.len())
        .ok_or_else(|| Error::Format(format!("blob {} is truncated", entry.name())))?;
    let raw = &blobs[start..end];
    let size = entry.dtype().size();
    Ok(raw
        .chunks_exact(size)
        .map(|c| match entry.dtype() {
            Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            Dtype::F32 => f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))),
            Dtype::U32 => f64::from(u32::from_le_bytes(c.try_into().expect("4 bytes"))),
        })
        .collect())
}

pub fn decode_tensor(blobs: &[u8], entry: &ManifestEntry) -> Result<Tensor> {
    if entry.shape().contains(&0) {
        return Err(Error::Manifest(format!("{} has an empty shape {:?}", entry.name(), entry.shape())));
    }
    Tensor::new(entry.shape().to_vec(), decode(blobs, entry)?)
}
