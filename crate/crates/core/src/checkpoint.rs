//! Binary checkpoint files.
//!
//! All integers are little-endian.
//!
//! ```text
//! "HAFC"              4 bytes magic
//! version             u32 (currently 1)
//! config_len          u32, then config_len bytes of UTF-8 `key = value` model config
//! tensor_count        u32
//! per tensor, sorted by name:
//!   name_len          u32, then name_len bytes of UTF-8
//!   rank              u32, then rank x u32 dims
//!   values            prod(dims) x f64
//! ```

use std::path::Path;

use crate::config::{model_config_from_text, model_config_to_text};
use crate::error::{Error, Result};
use crate::mixers::matrix_dims;
use crate::model::{Model, ParameterStore};
use crate::tensor::FrameMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HAFC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model_config_to_text(model.config());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let mut params: Vec<_> = model.store().iter().collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption {
                path: self.path.to_path_buf(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: format!("{what} is not valid UTF-8"),
        })
    }
}

/// `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format(format!(
            "bad magic {:?}, expected \"HAFC\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = r.utf8(cfg_len, "config")?;
    let cfg = model_config_from_text(cfg_text).map_err(|d| format(format!("embedded config: {d}")))?;

    let count = r.u32("tensor count")? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?.to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = matrix_dims(&shape);
        let n = rows.checked_mul(cols).ok_or_else(|| format(format!("`{name}` is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| format(format!("`{name}` is too large")))?, "tensor values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = FrameMatrix::from_vec(rows, cols, values)
            .map_err(|e| format(format!("`{name}`: {e}")))?;
        store
            .push(name, shape, value, true)
            .map_err(|e| format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Model::from_parts(cfg, store).map_err(|e| format(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
