//! Single-file archive of named little-endian arrays behind a JSON header.
//!
//! Layout: 8 magic bytes, header length as `u64` LE, header JSON, payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tapegrad::{Real, Tensor};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"ONEDIRAR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

/// Model description stored with every archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub channels: usize,
    pub image_size: usize,
    pub width_scale: f64,
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub version: u32,
    pub channels: usize,
    pub image_size: usize,
    pub width_scale: f64,
    pub iteration: u64,
    pub dtype: String,
    pub arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
    /// Free-form state that is not an array (optimizer step counts, RNG positions).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl ArchiveHeader {
    pub fn meta(&self) -> ArchiveMeta {
        ArchiveMeta {
            channels: self.channels,
            image_size: self.image_size,
            width_scale: self.width_scale,
            iteration: self.iteration,
        }
    }
}

/// Decoded archive.
#[derive(Clone, Debug)]
pub struct Archive<T> {
    pub header: ArchiveHeader,
    arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Archive<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Arrays whose names start with `prefix`, in stored order, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes `arrays` to `path` atomically (temporary file, then rename).
pub fn write_archive<T: Real>(
    path: &Path,
    meta: &ArchiveMeta,
    arrays: &[(String, &Tensor<T>)],
    extra: serde_json::Value,
) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        if entries.iter().any(|e: &ArrayEntry| &e.name == name) {
            return Err(corrupt(path, format!("duplicate array name {name}")));
        }
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = ArchiveHeader {
        version: FORMAT_VERSION,
        channels: meta.channels,
        image_size: meta.image_size,
        width_scale: meta.width_scale,
        iteration: meta.iteration,
        dtype: T::DTYPE.to_string(),
        arrays: entries,
        payload_sha256: hex(&Sha256::digest(&payload)),
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

/// Reads only the header of an archive.
pub fn read_header(path: &Path) -> Result<ArchiveHeader> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(split(path, &bytes)?.0)
}

fn split<'a>(path: &Path, bytes: &'a [u8]) -> Result<(ArchiveHeader, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint archive"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: ArchiveHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!("archive version {} (expected {FORMAT_VERSION})", header.version),
        ));
    }
    Ok((header, &bytes[end..]))
}

/// Reads and verifies an archive.
pub fn read_archive<T: Real>(path: &Path) -> Result<Archive<T>> {
    let bytes = std::fs::read(path).at(path)?;
    let (header, payload) = split(path, &bytes)?;
    if header.dtype != T::DTYPE {
        return Err(corrupt(
            path,
            format!("stored dtype {} but {} requested", header.dtype, T::DTYPE),
        ));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt(path, "payload checksum mismatch"));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        let n: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(n * T::BYTES)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| corrupt(path, format!("array {} out of bounds", e.name)))?;
        let data = payload[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        arrays.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Archive { header, arrays })
}
