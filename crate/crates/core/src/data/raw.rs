//! Portable raw format: `<case>.json` header next to a little-endian blob,
//! `<case>.f32` for images and `<case>.u8` for label masks. Voxel order is
//! z-major, then y, then x.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{voxel_count, Shape3, Spacing};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub case_id: String,
    pub shape: Shape3,
    pub spacing: [f64; 3],
    #[serde(default)]
    pub dtype: Option<String>,
}

pub fn header_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn read_header(blob: &Path) -> Result<RawHeader> {
    let path = header_path(blob);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: RawHeader =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    Spacing(header.spacing).validate()?;
    Ok(header)
}

fn write_header(blob: &Path, header: &RawHeader) -> Result<()> {
    let path = header_path(blob);
    let text = serde_json::to_string_pretty(header)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_f32(blob: &Path) -> Result<(RawHeader, Vec<f32>)> {
    let header = read_header(blob)?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    let n = voxel_count(header.shape);
    if bytes.len() != 4 * n {
        return Err(Error::format(
            blob,
            format!("expected {} bytes for shape {:?}, found {}", 4 * n, header.shape, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

pub fn read_u8(blob: &Path) -> Result<(RawHeader, Vec<u8>)> {
    let header = read_header(blob)?;
    let bytes = fs::read(blob).map_err(|e| Error::io(blob, e))?;
    let n = voxel_count(header.shape);
    if bytes.len() != n {
        return Err(Error::format(
            blob,
            format!("expected {n} bytes for shape {:?}, found {}", header.shape, bytes.len()),
        ));
    }
    Ok((header, bytes))
}

pub fn write_f32(blob: &Path, case_id: &str, shape: Shape3, spacing: Spacing, data: &[f32]) -> Result<()> {
    if data.len() != voxel_count(shape) {
        return Err(Error::Shape(format!("raw write: {} values for {shape:?}", data.len())));
    }
    write_header(
        blob,
        &RawHeader {
            case_id: case_id.to_string(),
            shape,
            spacing: spacing.0,
            dtype: Some("f32".into()),
        },
    )?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(blob, bytes).map_err(|e| Error::io(blob, e))
}

/// Writes a mask blob. An existing header of matching geometry (written for the
/// image of the same case) is left in place.
pub fn write_u8(blob: &Path, case_id: &str, shape: Shape3, spacing: Spacing, data: &[u8]) -> Result<()> {
    if data.len() != voxel_count(shape) {
        return Err(Error::Shape(format!("raw write: {} labels for {shape:?}", data.len())));
    }
    let keep = matches!(read_header(blob), Ok(h) if h.shape == shape && h.spacing == spacing.0);
    if !keep {
        write_header(
            blob,
            &RawHeader {
                case_id: case_id.to_string(),
                shape,
                spacing: spacing.0,
                dtype: Some("u8".into()),
            },
        )?;
    }
    fs::write(blob, data).map_err(|e| Error::io(blob, e))
}
