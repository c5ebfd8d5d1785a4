//! Single-file NIfTI-1 import (`.nii`, uncompressed).

use std::fs;
use std::path::Path;

use modereg_core::{Dims, Volume};

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::U8),
            4 => Some(Datatype::I16),
            16 => Some(Datatype::F32),
            _ => None,
        }
    }

    pub fn bits(self) -> i16 {
        match self {
            Datatype::U8 => 8,
            Datatype::I16 => 16,
            Datatype::F32 => 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dims: Dims,
    pub datatype: Datatype,
    pub pixdim: [f64; 3],
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub little_endian: bool,
}

struct Reader<'a> {
    b: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.b[at..at + N]);
        if !self.le {
            a.reverse();
        }
        a
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

/// Parse the fixed 348-byte header. `path` is only used in error messages.
pub fn parse_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::parse(
            path,
            "sizeof_hdr",
            format!("truncated header: {} of {HEADER_SIZE} bytes", bytes.len()),
        ));
    }
    let le = match (Reader { b: bytes, le: true }).i32(0) {
        348 => true,
        _ if (Reader { b: bytes, le: false }).i32(0) == 348 => false,
        v => return Err(Error::parse(path, "sizeof_hdr", format!("expected 348, got {v}"))),
    };
    let r = Reader { b: bytes, le };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::parse(path, "magic", format!("expected \"n+1\\0\", got {:?}", &bytes[344..348])));
    }
    let ndim = r.i16(40);
    if ndim != 3 {
        return Err(Error::parse(path, "dim", format!("unsupported dimensionality {ndim}")));
    }
    let mut ext = [0usize; 3];
    for (a, e) in ext.iter_mut().enumerate() {
        let d = r.i16(42 + 2 * a);
        if d < 1 {
            return Err(Error::parse(path, "dim", format!("dim[{}] = {d} is not positive", a + 1)));
        }
        *e = d as usize;
    }
    let code = r.i16(70);
    let datatype = Datatype::from_code(code)
        .ok_or_else(|| Error::parse(path, "datatype", format!("unsupported datatype {code}")))?;
    let bitpix = r.i16(72);
    if bitpix != datatype.bits() {
        return Err(Error::parse(path, "bitpix", format!("{bitpix} does not match datatype {code}")));
    }
    let mut pixdim = [0.0; 3];
    for (a, p) in pixdim.iter_mut().enumerate() {
        let v = r.f32(80 + 4 * a) as f64;
        if !(v.is_finite() && v != 0.0) {
            return Err(Error::parse(path, "pixdim", format!("pixdim[{}] = {v} is not a usable spacing", a + 1)));
        }
        *p = v.abs();
    }
    let off = r.f32(108);
    if !(off >= HEADER_SIZE as f32 && off.fract() == 0.0) {
        return Err(Error::parse(path, "vox_offset", format!("{off} is not a byte offset past the header")));
    }
    Ok(NiftiHeader {
        dims: Dims::new(ext[0], ext[1], ext[2]),
        datatype,
        pixdim,
        vox_offset: off as usize,
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        little_endian: le,
    })
}

/// Decode a whole `.nii` image into `f32`, applying `scl_slope`/`scl_inter`
/// when the slope is non-zero.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume<f32>> {
    let h = parse_header(bytes, path)?;
    let n = h.dims.len();
    let size = h.datatype.bits() as usize / 8;
    let end = h.vox_offset + n * size;
    if bytes.len() < end {
        return Err(Error::parse(
            path,
            "data",
            format!("truncated file: voxel data needs {end} bytes, found {}", bytes.len()),
        ));
    }
    let r = Reader { b: bytes, le: h.little_endian };
    let at = |i: usize| h.vox_offset + i * size;
    let raw: Vec<f32> = match h.datatype {
        Datatype::U8 => bytes[h.vox_offset..end].iter().map(|&v| v as f32).collect(),
        Datatype::I16 => (0..n).map(|i| r.i16(at(i)) as f32).collect(),
        Datatype::F32 => (0..n).map(|i| r.f32(at(i))).collect(),
    };
    let data = if h.scl_slope != 0.0 && h.scl_slope.is_finite() {
        let inter = if h.scl_inter.is_finite() { h.scl_inter } else { 0.0 };
        raw.into_iter().map(|v| v * h.scl_slope + inter).collect()
    } else {
        raw
    };
    Ok(Volume::new(h.dims, h.pixdim, data)?)
}

pub fn load_nifti(path: &Path) -> Result<Volume<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Whether `path` looks like a NIfTI file by extension.
pub fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}
