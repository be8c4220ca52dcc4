//! Versioned binary checkpoints: config JSON, a shape manifest, then f32 data.
//!
//! ```text
//! "KGFCKPT1" u32:version u32:len config-json
//! u32:count { u32:len name u32:rows u32:cols }*  f32* (row-major, tensor order)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"KGFCKPT1";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, x: usize) {
    buf.extend_from_slice(&(x as u32).to_le_bytes());
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize);
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut buf, cfg.len());
    buf.extend_from_slice(&cfg);
    put_u32(&mut buf, model.tensors.len());
    for (name, t) in model.names.iter().zip(&model.tensors) {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.nrows());
        put_u32(&mut buf, t.ncols());
    }
    for t in &model.tensors {
        for x in t.iter() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let mut model = Model::new(config)?;
    let count = r.u32()?;
    if count != model.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, the configured model has {}",
            model.tensors.len()
        )));
    }
    let mut shapes = Vec::with_capacity(count);
    for i in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shape = (r.u32()?, r.u32()?);
        if name != model.names[i] || shape != model.tensors[i].dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {i} is {name} {shape:?}, expected {} {:?}",
                model.names[i],
                model.tensors[i].dim()
            )));
        }
        shapes.push(shape);
    }
    for (i, shape) in shapes.into_iter().enumerate() {
        let bytes = r.take(4 * shape.0 * shape.1)?;
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        model.tensors[i] = Array2::from_shape_vec(shape, vals).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    model.check_finite()?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

/// Rounds parameters to the precision a checkpoint stores.
pub fn round_to_f32(model: &mut Model) {
    for t in &mut model.tensors {
        t.mapv_inplace(|x| x as f32 as f64);
    }
}
