//! Raw little-endian volumes with a JSON sidecar.
//!
//! `name.raw` holds the samples, `name.json` the header. Displacement fields
//! are stored as three channel planes (x, y, z components) and carry
//! `"channels": 3` in the header.

use std::fs;
use std::path::{Path, PathBuf};

use modereg_core::metrics::LabelVolume;
use modereg_core::{Dims, DisplacementField, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ORDER: &str = "xyz-row-major";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    /// Extents along x, y, z; x varies fastest in the data file.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

fn is_one(c: &usize) -> bool {
    *c == 1
}

impl RawHeader {
    pub fn new(dims: Dims, spacing: [f64; 3], dtype: Dtype, channels: usize) -> Self {
        RawHeader { dims: dims.as_array(), spacing, dtype, order: ORDER.into(), channels }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn byte_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.channels * self.dtype.size()
    }
}

/// Sidecar and data paths for `path`, which may name either file or the
/// common stem.
pub fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let add = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (add("json"), add("raw"))
}

pub fn read_header(path: &Path) -> Result<RawHeader> {
    let (json, _) = paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let h: RawHeader = serde_json::from_str(&text).map_err(|e| Error::parse(&json, "header", e.to_string()))?;
    if h.order != ORDER {
        return Err(Error::parse(&json, "order", format!("expected \"{ORDER}\", got \"{}\"", h.order)));
    }
    if h.dims.iter().any(|&d| d == 0) || h.channels == 0 {
        return Err(Error::parse(&json, "dims", format!("empty grid {:?} x {}", h.dims, h.channels)));
    }
    if h.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::parse(&json, "spacing", format!("{:?} is not positive", h.spacing)));
    }
    Ok(h)
}

fn read_data(path: &Path, h: &RawHeader) -> Result<Vec<u8>> {
    let (_, raw) = paths(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != h.byte_len() {
        return Err(Error::parse(
            &raw,
            "data",
            format!("expected {} bytes, found {}", h.byte_len(), bytes.len()),
        ));
    }
    Ok(bytes)
}

fn write(path: &Path, h: &RawHeader, data: Vec<u8>) -> Result<()> {
    let (json, raw) = paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(h).expect("header serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, data).map_err(|e| Error::io(&raw, e))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn u16s(b: &[u8]) -> Vec<u16> {
    b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
}

pub fn save_volume(path: &Path, vol: &Volume<f32>) -> Result<()> {
    let h = RawHeader::new(vol.dims(), vol.spacing(), Dtype::F32, 1);
    write(path, &h, f32_bytes(vol.data()))
}

/// Load a single-channel volume; `u16` data is converted to `f32`.
pub fn load_volume(path: &Path) -> Result<Volume<f32>> {
    let h = read_header(path)?;
    if h.channels != 1 {
        return Err(Error::parse(path, "channels", format!("expected 1, got {}", h.channels)));
    }
    let b = read_data(path, &h)?;
    let data = match h.dtype {
        Dtype::F32 => f32s(&b),
        Dtype::U16 => u16s(&b).into_iter().map(f32::from).collect(),
    };
    Ok(Volume::new(h.dims(), h.spacing, data)?)
}

pub fn save_labels(path: &Path, lab: &LabelVolume) -> Result<()> {
    let h = RawHeader::new(lab.dims(), lab.spacing(), Dtype::U16, 1);
    write(path, &h, lab.data().iter().flat_map(|x| x.to_le_bytes()).collect())
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let h = read_header(path)?;
    if h.dtype != Dtype::U16 || h.channels != 1 {
        return Err(Error::parse(path, "dtype", "label maps must be single-channel u16"));
    }
    let b = read_data(path, &h)?;
    Ok(LabelVolume::new(h.dims(), u16s(&b))?.with_spacing(h.spacing))
}

pub fn save_field(path: &Path, phi: &DisplacementField<f32>, spacing: [f64; 3]) -> Result<()> {
    let h = RawHeader::new(phi.dims(), spacing, Dtype::F32, 3);
    write(path, &h, f32_bytes(phi.data()))
}

pub fn load_field(path: &Path) -> Result<DisplacementField<f32>> {
    let h = read_header(path)?;
    if h.dtype != Dtype::F32 || h.channels != 3 {
        return Err(Error::parse(path, "channels", "displacement fields are 3-channel f32"));
    }
    let b = read_data(path, &h)?;
    Ok(DisplacementField::new(h.dims(), f32s(&b))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_and_extensions_resolve_to_the_same_files() {
        let want = (PathBuf::from("d/a.b.json"), PathBuf::from("d/a.b.raw"));
        assert_eq!(paths(Path::new("d/a.b")), want);
        assert_eq!(paths(Path::new("d/a.b.raw")), want);
        assert_eq!(paths(Path::new("d/a.b.json")), want);
    }

    #[test]
    fn header_defaults_to_one_channel() {
        let h: RawHeader =
            serde_json::from_str(r#"{"dims":[2,3,4],"spacing":[1,1,2],"dtype":"u16","order":"xyz-row-major"}"#).unwrap();
        assert_eq!(h.channels, 1);
        assert_eq!(h.byte_len(), 48);
        assert!(!serde_json::to_string(&h).unwrap().contains("channels"));
    }
}
