//! On-disk recording container: `<stem>.f32` holds little-endian 32-bit
//! floats in channel-major (C×T row-major) order, `<stem>.json` holds the
//! metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Recording;
use crate::error::{Error, Result};

pub const DATA_EXTENSION: &str = "f32";
pub const META_EXTENSION: &str = "json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingMeta {
    pub fs: f64,
    pub channels: usize,
    pub samples: usize,
    pub subject_id: String,
    pub session_id: String,
    pub channel_names: Vec<String>,
}

pub fn data_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.{DATA_EXTENSION}"))
}

pub fn meta_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.{META_EXTENSION}"))
}

/// Write atomically: a temporary file in the destination directory is
/// renamed into place once complete.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Store `rec` as `<dir>/<stem>.f32` plus `<dir>/<stem>.json`.
pub fn write_recording(dir: &Path, stem: &str, rec: &Recording) -> Result<()> {
    let mut bytes = Vec::with_capacity(rec.data.len() * 4);
    for row in rec.data.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta = RecordingMeta {
        fs: rec.fs,
        channels: rec.channels(),
        samples: rec.samples(),
        subject_id: rec.subject_id.clone(),
        session_id: rec.session_id.clone(),
        channel_names: rec.channel_names.clone(),
    };
    write_atomic(&data_path(dir, stem), &bytes)?;
    write_atomic(&meta_path(dir, stem), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(())
}

/// Read a recording given the path of its data file (or its stem).
pub fn read_recording(path: &Path) -> Result<Recording> {
    let data_file = path.with_extension(DATA_EXTENSION);
    let meta_file = path.with_extension(META_EXTENSION);
    for p in [&data_file, &meta_file] {
        if !p.exists() {
            return Err(Error::NotFound(p.clone()));
        }
    }
    let meta: RecordingMeta = serde_json::from_slice(&fs::read(&meta_file)?).map_err(|e| Error::Format {
        path: meta_file.clone(),
        reason: e.to_string(),
    })?;
    let raw = fs::read(&data_file)?;
    let expected = meta.channels * meta.samples * 4;
    if raw.len() != expected {
        return Err(Error::Format {
            path: data_file,
            reason: format!(
                "expected {expected} bytes for {}×{} samples, found {}",
                meta.channels,
                meta.samples,
                raw.len()
            ),
        });
    }
    if meta.channel_names.len() != meta.channels {
        return Err(Error::Format {
            path: meta_file,
            reason: "channel name count differs from channel count".into(),
        });
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((meta.channels, meta.samples), values).map_err(|e| Error::Format {
        path: data_file,
        reason: e.to_string(),
    })?;
    let mut rec = Recording::new(data, meta.fs, meta.subject_id, meta.session_id)?;
    rec.channel_names = meta.channel_names;
    Ok(rec)
}
