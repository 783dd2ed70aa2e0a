//! On-disk scan directories: `meta.json`, `volume.f32`, `labels.u8`.
//!
//! Binary payloads are raw little-endian C-order arrays with no header; the
//! dims live in `meta.json`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CohortId, LabelMap, RawVolumes, Volume3D};

pub const META_FILE: &str = "meta.json";
pub const VOLUME_FILE: &str = "volume.f32";
pub const LABELS_FILE: &str = "labels.u8";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed meta.json in {path}: {source}")]
    Meta { path: String, source: serde_json::Error },
    #[error("payload size mismatch in {0}")]
    Size(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub dims: [usize; 3],
    pub cohort: CohortId,
    pub subject_id: String,
    pub scan_id: String,
    pub seed: u64,
    pub raw_volumes: RawVolumes,
}

pub fn volume_to_bytes(vol: &Volume3D) -> Vec<u8> {
    let mut out = Vec::with_capacity(vol.len() * 4);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn volume_from_bytes(dims: [usize; 3], bytes: &[u8]) -> Option<Volume3D> {
    if bytes.len() != dims.iter().product::<usize>() * 4 {
        return None;
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume3D::from_vec(dims, data)
}

pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<(), StoreError> {
    fs::write(path, volume_to_bytes(vol)).map_err(io_err(path))
}

pub fn read_volume(path: &Path, dims: [usize; 3]) -> Result<Volume3D, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    volume_from_bytes(dims, &bytes).ok_or_else(|| StoreError::Size(path.display().to_string()))
}

/// Writes one scan directory, creating it if needed.
pub fn write_scan(dir: &Path, meta: &ScanMeta, vol: &Volume3D, labels: &LabelMap) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(meta)
        .map_err(|source| StoreError::Meta { path: meta_path.display().to_string(), source })?;
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;
    write_volume(&dir.join(VOLUME_FILE), vol)?;
    let labels_path = dir.join(LABELS_FILE);
    fs::write(&labels_path, labels.data()).map_err(io_err(&labels_path))
}

pub fn read_meta(dir: &Path) -> Result<ScanMeta, StoreError> {
    let meta_path = dir.join(META_FILE);
    let bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    serde_json::from_slice(&bytes).map_err(|source| StoreError::Meta { path: meta_path.display().to_string(), source })
}

pub fn read_scan(dir: &Path) -> Result<(ScanMeta, Volume3D, LabelMap), StoreError> {
    let meta = read_meta(dir)?;
    let vol = read_volume(&dir.join(VOLUME_FILE), meta.dims)?;
    let labels_path = dir.join(LABELS_FILE);
    let raw = fs::read(&labels_path).map_err(io_err(&labels_path))?;
    let labels =
        LabelMap::from_vec(meta.dims, raw).ok_or_else(|| StoreError::Size(labels_path.display().to_string()))?;
    Ok((meta, vol, labels))
}
