//! RVOL on-disk format: a JSON header sidecar plus a little-endian raw payload.
//!
//! ```json
//! {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32","order":"x-fastest","raw":"vol.img.raw"}
//! ```
//!
//! The payload is x-fastest, z-slowest with no padding. `raw` is relative to the
//! header's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Geometry, LabelDtype, LabelVolume, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }
}

pub const ORDER_X_FASTEST: &str = "x-fastest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Scalar(Volume),
    Labels(LabelVolume),
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::HeaderParse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn raw_path(header_path: &Path, raw: &str) -> PathBuf {
    header_path.parent().unwrap_or_else(|| Path::new(".")).join(raw)
}

pub fn load_volume(header_path: impl AsRef<Path>) -> Result<AnyVolume> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| parse_err(header_path, e.to_string()))?;
    if header.order != ORDER_X_FASTEST {
        return Err(parse_err(header_path, format!("unsupported order {:?}", header.order)));
    }
    let geometry = Geometry::new(header.dims, header.spacing).map_err(|e| parse_err(header_path, e.to_string()))?;
    let raw = raw_path(header_path, &header.raw);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = (geometry.voxel_count() * header.dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: raw,
            expected,
            actual: bytes.len() as u64,
        });
    }
    match header.dtype {
        Dtype::F32 => {
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(AnyVolume::Scalar(Volume::new(geometry, data)?))
        }
        Dtype::U8 => {
            let labels = bytes.iter().map(|&b| b as u16).collect();
            Ok(AnyVolume::Labels(LabelVolume::new(geometry, labels)?.with_dtype(LabelDtype::U8)?))
        }
        Dtype::U16 => {
            let labels = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            Ok(AnyVolume::Labels(LabelVolume::new(geometry, labels)?))
        }
    }
}

pub fn load_scalar(header_path: impl AsRef<Path>) -> Result<Volume> {
    let p = header_path.as_ref();
    match load_volume(p)? {
        AnyVolume::Scalar(v) => Ok(v),
        AnyVolume::Labels(_) => Err(parse_err(p, "expected dtype f32")),
    }
}

pub fn load_labels(header_path: impl AsRef<Path>) -> Result<LabelVolume> {
    let p = header_path.as_ref();
    match load_volume(p)? {
        AnyVolume::Labels(l) => Ok(l),
        AnyVolume::Scalar(_) => Err(parse_err(p, "expected dtype u8 or u16")),
    }
}

/// Raw file name derived from a header name: `a.img.json` -> `a.img.raw`.
fn raw_name(header_path: &Path) -> Result<String> {
    let name = header_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Input(format!("bad header path {}", header_path.display())))?;
    let stem = name.strip_suffix(".json").unwrap_or(name);
    Ok(format!("{stem}.raw"))
}

pub fn save_volume(volume: &AnyVolume, header_path: impl AsRef<Path>) -> Result<()> {
    let header_path = header_path.as_ref();
    let raw = raw_name(header_path)?;
    let (geometry, dtype, bytes) = match volume {
        AnyVolume::Scalar(v) => {
            let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            (v.geometry(), Dtype::F32, bytes)
        }
        AnyVolume::Labels(l) => match l.dtype() {
            LabelDtype::U8 => (l.geometry(), Dtype::U8, l.labels().iter().map(|&x| x as u8).collect()),
            LabelDtype::U16 => (
                l.geometry(),
                Dtype::U16,
                l.labels().iter().flat_map(|x| x.to_le_bytes()).collect(),
            ),
        },
    };
    let header = Header {
        dims: geometry.dims,
        spacing: geometry.spacing,
        dtype,
        order: ORDER_X_FASTEST.to_string(),
        raw: raw.clone(),
    };
    let raw_full = raw_path(header_path, &raw);
    fs::write(&raw_full, bytes).map_err(|e| Error::io(&raw_full, e))?;
    let text = serde_json::to_string(&header).expect("header serializes");
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn checksum_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
