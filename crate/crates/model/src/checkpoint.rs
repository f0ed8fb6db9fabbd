//! Versioned binary checkpoint: magic, format version, the model config as
//! JSON, then every parameter tensor by name.
//!
//! ```text
//! "MSEVACKP" | u32 version | u32 len | config JSON
//! u32 count | { u32 len | name | u32 rows | u32 cols | rows·cols × f64 }*
//! ```
//! All integers and floats are little-endian; floats are stored bit-exact.

use std::io::Write;
use std::path::Path;

use crate::tape::Mat;
use crate::{EmotionModel, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"MSEVACKP";
pub const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn to_bytes(model: &EmotionModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, m) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<EmotionModel, ModelError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| err(format!("config: {e}")))?;
    let mut model = EmotionModel::new(cfg)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(err(format!("{count} tensors, architecture has {}", model.params().len())));
    }
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| err("tensor name is not UTF-8"))?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let bytes = r.take(rows * cols * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let slot = model
            .params_mut()
            .by_name_mut(&name)
            .ok_or_else(|| err(format!("unknown tensor {name}")))?;
        if slot.shape() != (rows, cols) {
            return Err(err(format!("tensor {name} is {rows}x{cols}, expected {:?}", slot.shape())));
        }
        *slot = Mat::from_vec(rows, cols, data);
    }
    if r.pos != buf.len() {
        return Err(err("trailing bytes"));
    }
    Ok(model)
}

pub fn save(model: &EmotionModel, path: &Path) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&to_bytes(model))?;
    f.sync_all()?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EmotionModel, ModelError> {
    from_bytes(&std::fs::read(path)?)
}
