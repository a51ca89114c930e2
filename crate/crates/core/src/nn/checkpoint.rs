//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FSCK" | u32 version | u32 config_len | config JSON
//! u32 entry_count
//! per entry, sorted by name:
//!   u16 name_len | name | u8 kind (0 param, 1 buffer) | u8 frozen
//!   u8 ndim | u32 dims[ndim] | f32 values[product(dims)]
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::params::{FusionConfig, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"FSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: FusionConfig,
    pub params: ParameterStore<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new<T: Real>(config: FusionConfig, params: &ParameterStore<T>) -> Self {
        Self {
            config,
            params: params.cast(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let count = self.params.len() + self.params.buffers().count();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut write = |name: &str, kind: u8, frozen: bool, value: &ArrayD<f32>| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            out.push(frozen as u8);
            out.push(value.ndim() as u8);
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, p) in self.params.iter() {
            write(name, 0, p.frozen, &p.value);
        }
        for (name, b) in self.params.buffers() {
            write(name, 1, false, b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let config: FusionConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = r.u32()?;
        let mut params = ParameterStore::empty();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let kind = r.u8()?;
            let frozen = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let payload = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length matches dims");
            match kind {
                0 => params.insert(name, value, frozen),
                1 => params.insert_buffer(name, value),
                k => return Err(Error::Format(format!("unknown entry kind {k}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }
}
