use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NormStats, Provenance, WindowedDataset};
use crate::container::{self, BlobWriter, Dtype, ManifestEntry, FORMAT_VERSION};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"DANHARD1";

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveHeader {
    format_version: u32,
    axes: usize,
    width: usize,
    class_names: Vec<String>,
    provenance: Vec<Provenance>,
    norm: Option<NormStats>,
    segments: Option<Vec<(usize, usize)>>,
    manifest: Vec<ManifestEntry>,
}

pub fn save_archive(dataset: &WindowedDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let n = dataset.len();
    let mut w = BlobWriter::default();
    w.push("windows", &[n, 1, dataset.axes, dataset.width], Dtype::F64, &dataset.windows);
    let labels: Vec<f64> = dataset.labels.iter().map(|&l| l as f64).collect();
    w.push("labels", &[n], Dtype::U32, &labels);
    let header = ArchiveHeader {
        format_version: FORMAT_VERSION,
        axes: dataset.axes,
        width: dataset.width,
        class_names: dataset.class_names.clone(),
        provenance: dataset.provenance.clone(),
        norm: dataset.norm.clone(),
        segments: dataset.segments.clone(),
        manifest: w.manifest,
    };
    container::write(path, ARCHIVE_MAGIC, &header, &w.bytes)
}

pub fn load_archive(path: &Path) -> Result<WindowedDataset> {
    let ctx = || format!("loading archive {}", path.display());
    let c: container::Container<ArchiveHeader> = container::read(path, ARCHIVE_MAGIC).map_err(|e| e.context(ctx()))?;
    let h = c.header;
    let n = h.provenance.len();
    let find = |name: &str, shape: Vec<usize>, dtype: Dtype| -> Result<&ManifestEntry> {
        let e = h
            .manifest
            .iter()
            .find(|e| e.name() == name)
            .ok_or_else(|| Error::Manifest(format!("archive has no '{name}' blob")))?;
        if e.shape() != shape || e.dtype() != dtype {
            return Err(Error::Manifest(format!(
                "'{name}' is {:?} {:?}, expected {shape:?} {dtype:?}",
                e.shape(),
                e.dtype()
            )));
        }
        Ok(e)
    };
    let load = || -> Result<WindowedDataset> {
        let windows = container::decode(&c.blobs, find("windows", vec![n, 1, h.axes, h.width], Dtype::F64)?)?;
        let labels = container::decode(&c.blobs, find("labels", vec![n], Dtype::U32)?)?
            .into_iter()
            .map(|l| l as usize)
            .collect();
        let d = WindowedDataset {
            axes: h.axes,
            width: h.width,
            windows,
            labels,
            class_names: h.class_names.clone(),
            provenance: h.provenance.clone(),
            norm: h.norm.clone(),
            segments: h.segments.clone(),
        };
        d.validate()?;
        Ok(d)
    };
    load().map_err(|e| e.context(ctx()))
}
