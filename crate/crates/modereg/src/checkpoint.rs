//! Model checkpoints.
//!
//! Layout (little-endian): `b"MDT2"`, format version `u32`, config JSON
//! length `u32` and bytes, tensor count `u32`, then per tensor the name
//! (`u32` length + UTF-8), rank `u32`, each extent as `u64`, and the `f32`
//! values.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use modereg_core::model::{Model, ModelConfig};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDT2";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(w: &mut impl Write, model: &Model<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for t in model.params().iter() {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let bytes: Vec<u8> = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.b.len() - self.at < n {
            return Err(Error::parse(
                self.path,
                field,
                format!("truncated: need {n} bytes at offset {}, {} left", self.at, self.b.len() - self.at),
            ));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Decode a checkpoint. Every tensor the configuration needs must be present
/// exactly once with its expected shape.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let mut c = Cursor { b: bytes, at: 0, path };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::parse(path, "magic", "not a MDT2 checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(path, "version", format!("unsupported format version {version}")));
    }
    let n = c.u32("config")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(c.take(n, "config")?).map_err(|e| Error::parse(path, "config", e.to_string()))?;
    let mut model = Model::<f32>::new(config, 0)?;
    let count = c.u32("tensor count")? as usize;
    if count != model.params().len() {
        return Err(Error::parse(
            path,
            "tensor count",
            format!("config needs {} tensors, file has {count}", model.params().len()),
        ));
    }
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = c.u32("tensor name")? as usize;
        let name = std::str::from_utf8(c.take(len, "tensor name")?)
            .map_err(|_| Error::parse(path, "tensor name", "not UTF-8"))?
            .to_string();
        let rank = c.u32("tensor shape")? as usize;
        let shape = (0..rank).map(|_| c.u64("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::parse(path, "tensor name", format!("unexpected tensor {name}")))?;
        if model.params().get(id).shape != shape {
            return Err(Error::parse(
                path,
                "tensor shape",
                format!("{name} has shape {shape:?}, expected {:?}", model.params().get(id).shape),
            ));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::parse(path, "tensor name", format!("duplicate tensor {name}")));
        }
        let numel: usize = shape.iter().product();
        let values = c
            .take(numel * 4, "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        model.params_mut().set_values(&name, values)?;
    }
    if c.at != bytes.len() {
        return Err(Error::parse(path, "tensor data", format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
