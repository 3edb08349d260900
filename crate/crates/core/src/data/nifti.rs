//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only 3D scalar volumes are handled. Trailing singleton dimensions are
//! accepted; data is converted to `f32` (images) or `u8` (masks).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::volume::{voxel_count, Shape3, Spacing};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub shape: Shape3,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

pub fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().to_ascii_lowercase().ends_with(".gz")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if is_gz(path) {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.raw(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

pub fn read(path: &Path) -> Result<NiftiVolume> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let big_endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::format(path, "sizeof_hdr is not 348")),
    };
    let r = Reader {
        bytes: &bytes,
        big_endian,
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "not a single-file NIfTI-1 image (magic != n+1)"));
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * i);
        if v < 1 {
            return Err(Error::format(path, format!("invalid dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(path, format!("only 3D volumes are supported, dims {dims:?}")));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let pix = |i: usize| f64::from(r.f32(76 + 4 * i)).abs();
    let spacing = Spacing([
        if nz > 1 || pix(3) > 0.0 { pix(3) } else { 1.0 },
        pix(2),
        pix(1),
    ]);
    spacing
        .validate()
        .map_err(|_| Error::format(path, format!("invalid pixdim {:?}", spacing.0)))?;

    let datatype = r.i16(70);
    let offset = r.f32(108).max(HEADER_SIZE as f32) as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);
    let n = nx * ny * nz;
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::format(path, format!("unsupported datatype {other}"))),
    };
    let body = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| Error::format(path, "truncated voxel data"))?;
    let mut data: Vec<f64> = body
        .chunks_exact(width)
        .map(|c| {
            let rd = Reader {
                bytes: c,
                big_endian,
            };
            match datatype {
                DT_UINT8 => f64::from(c[0]),
                DT_INT8 => f64::from(c[0] as i8),
                DT_INT16 => f64::from(rd.i16(0)),
                DT_UINT16 => f64::from(u16::from_le_bytes(rd.raw(0))),
                DT_INT32 => f64::from(rd.i32(0)),
                DT_UINT32 => f64::from(u32::from_le_bytes(rd.raw(0))),
                DT_FLOAT32 => f64::from(rd.f32(0)),
                _ => f64::from_le_bytes(rd.raw(0)),
            }
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        let (s, b) = (f64::from(slope), f64::from(inter));
        data.iter_mut().for_each(|v| *v = *v * s + b);
    }
    // NIfTI stores x fastest, then y, then z: exactly our z-major flat layout.
    Ok(NiftiVolume {
        shape: [nz, ny, nx],
        spacing,
        data,
    })
}

fn header(shape: Shape3, spacing: Spacing, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut h, 40, 3);
    put_i16(&mut h, 42, shape[2] as i16);
    put_i16(&mut h, 44, shape[1] as i16);
    put_i16(&mut h, 46, shape[0] as i16);
    for i in 4..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    put_f32(&mut h, 80, spacing.0[2] as f32);
    put_f32(&mut h, 84, spacing.0[1] as f32);
    put_f32(&mut h, 88, spacing.0[0] as f32);
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn check_dims(shape: Shape3, len: usize) -> Result<()> {
    if len != voxel_count(shape) || shape.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::Shape(format!("cannot write {len} voxels as NIfTI shape {shape:?}")));
    }
    Ok(())
}

pub fn write_f32(path: &Path, shape: Shape3, spacing: Spacing, data: &[f32]) -> Result<()> {
    check_dims(shape, data.len())?;
    let mut bytes = header(shape, spacing, DT_FLOAT32, 32);
    bytes.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    write_bytes(path, &bytes)
}

pub fn write_u8(path: &Path, shape: Shape3, spacing: Spacing, data: &[u8]) -> Result<()> {
    check_dims(shape, data.len())?;
    let mut bytes = header(shape, spacing, DT_UINT8, 8);
    bytes.extend_from_slice(data);
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let shape = [3, 4, 5];
        let spacing = Spacing([10.0, 1.458, 1.458]);
        let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.5 - 3.0).collect();
        for name in ["a.nii", "b.nii.gz"] {
            let p = dir.path().join(name);
            write_f32(&p, shape, spacing, &data).unwrap();
            let v = read(&p).unwrap();
            assert_eq!(v.shape, shape);
            assert!((v.spacing.0[0] - 10.0).abs() < 1e-6);
            assert!((v.spacing.0[2] - 1.458).abs() < 1e-6);
            assert_eq!(v.data, data.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mask_layout_is_x_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nii");
        let labels: Vec<u8> = (0..24).map(|i| (i % 5) as u8).collect();
        write_u8(&p, [2, 3, 4], Spacing([1.0, 1.0, 1.0]), &labels).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(i16::from_le_bytes([bytes[42], bytes[43]]), 4);
        assert_eq!(&bytes[VOX_OFFSET..], &labels[..]);
        assert_eq!(read(&p).unwrap().shape, [2, 3, 4]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.nii");
        std::fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(matches!(read(&p), Err(Error::Format { .. })));
    }
}
