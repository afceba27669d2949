//! Minimal single-file NIfTI-1 (`.nii`, `.nii.gz`) codec for 3D scalar volumes.
//!
//! Axis mapping: NIfTI `(i, j, k)` = our `(w, h, d)`, so the on-disk voxel
//! order (i fastest) is exactly our row-major `(d, h, w)` order.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{validate_spacing, Spacing};
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
/// Decompression guard for `.nii.gz` input.
const MAX_DECOMPRESSED: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
            DataType::I8 => 256,
            DataType::U16 => 512,
            DataType::U32 => 768,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            256 => DataType::I8,
            512 => DataType::U16,
            768 => DataType::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::U32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    /// `(d, h, w)` voxel counts.
    pub shape: [usize; 3],
    pub spacing: Spacing,
    /// `(d, h, w)`-ordered translation from the qform, when present.
    pub origin: Option<[f64; 3]>,
    pub datatype: DataType,
    /// Scaled intensities (`scl_slope` / `scl_inter` applied).
    pub data: Vec<f64>,
}

pub fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a: [u8; N] = self.bytes[off..off + N].try_into().unwrap();
        if self.big_endian {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .take(MAX_DECOMPRESSED)
            .read_to_end(&mut raw)
            .map_err(|e| Error::format("gzip", e.to_string()))?;
        return decode_raw(&raw);
    }
    decode_raw(bytes)
}

fn decode_raw(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format("sizeof_hdr", format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        other => return Err(Error::format("sizeof_hdr", format!("expected 348, found {other}"))),
    };
    let r = Reader { bytes, big_endian };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(Error::format("magic", "not a NIfTI-1 header"));
    }
    let ndim = r.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format("dim", format!("dim[0] = {ndim}, expected a 3-D volume")));
    }
    let mut dims = [0usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * i);
        if v < 1 {
            return Err(Error::format("dim", format!("dim[{}] = {v} must be positive", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::format("dim", "only single-channel 3-D volumes are supported"));
    }
    let datatype = DataType::from_code(r.i16(70))
        .ok_or_else(|| Error::format("datatype", format!("unsupported datatype code {}", r.i16(70))))?;
    let bitpix = r.i16(72);
    if bitpix as usize != datatype.size() * 8 {
        return Err(Error::format("bitpix", format!("{bitpix} disagrees with datatype {datatype:?}")));
    }
    // pixdim[1..=3] = (sx, sy, sz) live at offsets 80, 84, 88.
    let spacing = [r.f32(88) as f64, r.f32(84) as f64, r.f32(80) as f64];
    validate_spacing(&spacing).map_err(|_| Error::format("spacing", format!("pixdim holds non-positive spacing {spacing:?}")))?;
    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::format("vox_offset", format!("{vox_offset} precedes end of header")));
    }
    let vox_offset = vox_offset as usize;
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, if inter.is_finite() { inter } else { 0.0 }) };
    let shape = [dims[2], dims[1], dims[0]];
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("dim", "voxel count overflows"))?;
    let need = n
        .checked_mul(datatype.size())
        .and_then(|b| b.checked_add(vox_offset))
        .ok_or_else(|| Error::format("dim", "byte count overflows"))?;
    if bytes.len() < need {
        return Err(Error::format("data", format!("need {need} bytes, file has {}", bytes.len())));
    }
    let raw = &bytes[vox_offset..need];
    let sz = datatype.size();
    let mut data = Vec::with_capacity(n);
    for c in raw.chunks_exact(sz) {
        let mut b = [0u8; 8];
        b[..sz].copy_from_slice(c);
        if big_endian {
            b[..sz].reverse();
        }
        let v = match datatype {
            DataType::U8 => b[0] as f64,
            DataType::I8 => b[0] as i8 as f64,
            DataType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            DataType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            DataType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            DataType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            DataType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            DataType::F64 => f64::from_le_bytes(b),
        };
        data.push(v * slope + inter);
    }
    let origin = (r.i16(252) > 0).then(|| [r.f32(276) as f64, r.f32(272) as f64, r.f32(268) as f64]);
    Ok(NiftiImage {
        shape,
        spacing,
        origin,
        datatype,
        data,
    })
}

/// Serializes an uncompressed `.nii` byte stream (little-endian).
pub fn encode(img: &NiftiImage) -> Result<Vec<u8>> {
    validate_spacing(&img.spacing)?;
    let n: usize = img.shape.iter().product();
    if n != img.data.len() {
        return Err(Error::Shape(format!("NIfTI shape {:?} vs {} values", img.shape, img.data.len())));
    }
    if img.shape.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::format("dim", "axis longer than 32767 voxels"));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    let dims: [i16; 8] = [3, img.shape[2] as i16, img.shape[1] as i16, img.shape[0] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &img.datatype.code().to_le_bytes());
    put(&mut h, 72, &((img.datatype.size() * 8) as i16).to_le_bytes());
    let pixdim: [f32; 8] = [1.0, img.spacing[2] as f32, img.spacing[1] as f32, img.spacing[0] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1f32.to_le_bytes());
    h[123] = 2; // mm
    if let Some(o) = img.origin {
        put(&mut h, 252, &1i16.to_le_bytes());
        put(&mut h, 268, &(o[2] as f32).to_le_bytes());
        put(&mut h, 272, &(o[1] as f32).to_le_bytes());
        put(&mut h, 276, &(o[0] as f32).to_le_bytes());
    }
    put(&mut h, 344, b"n+1\0");
    let mut out = h;
    out.reserve(n * img.datatype.size());
    for &v in &img.data {
        match img.datatype {
            DataType::U8 => out.push(v as u8),
            DataType::I8 => out.push(v as i8 as u8),
            DataType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            DataType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            DataType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            DataType::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            DataType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DataType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}
