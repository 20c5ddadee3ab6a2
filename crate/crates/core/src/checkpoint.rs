//! Model checkpoint files.
//!
//! ```text
//! "LHFW" | version u8 | meta length u32 | meta JSON
//! tensor count u32 | per tensor: name length u16 | name | rank u8 | dims u32 x rank | f32 data
//! ```
//!
//! Integers and floats are little-endian. Vectors are stored with rank 1,
//! everything else with rank 4. Weights are stored as 32-bit floats, so a
//! saved model reloads exactly only if its values were already rounded with
//! [`ModelParams::round_to_f32`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hft::{HftConfig, ModelParams};
use crate::model::{parameter_layout, CodecModel};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"LHFW";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: HftConfig,
    pub model_id: u16,
    pub lambda_index: u8,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CodecModel,
    pub lambda_index: u8,
    pub lambda: f64,
}

impl Checkpoint {
    pub fn new(model: CodecModel, lambda_index: u8, lambda: f64) -> Self {
        Self { model, lambda_index, lambda }
    }

    pub fn model_id(&self) -> u16 {
        self.model.config.model_id()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            arch: self.model.config.clone(),
            model_id: self.model_id(),
            lambda_index: self.lambda_index,
            lambda: self.lambda,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name `{name}` is too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let s = t.shape();
            let dims: Vec<usize> = if s == Shape::vector(s.c) { vec![s.c] } else { s.dims().to_vec() };
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an LHFW checkpoint (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version} is not supported (expected {VERSION})")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.arch.validate()?;
        if meta.model_id != meta.arch.model_id() {
            return Err(Error::ArchMismatch(format!(
                "checkpoint claims model id {:#06x} but its architecture hashes to {:#06x}",
                meta.model_id,
                meta.arch.model_id()
            )));
        }
        let count = r.u32()? as usize;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt { offset: at, reason: "tensor name is not UTF-8".into() })?
                .to_owned();
            let rank = r.take(1)?[0];
            let shape = match rank {
                1 => Shape::vector(r.u32()? as usize),
                4 => Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize),
                _ => return Err(Error::Corrupt { offset: r.pos - 1, reason: format!("tensor `{name}` has rank {rank}") }),
            };
            let byte_len = shape
                .dims()
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or(Error::Truncated { offset: bytes.len() })?;
            let raw = r.take(byte_len)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            params.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt { offset: r.pos, reason: "trailing bytes after the tensor table".into() });
        }
        params
            .validate(&parameter_layout(&meta.arch)?)
            .map_err(|e| Error::ArchMismatch(format!("checkpoint does not match its declared architecture: {e}")))?;
        Ok(Self { model: CodecModel { config: meta.arch, params }, lambda_index: meta.lambda_index, lambda: meta.lambda })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::ArchMismatch(m) => Error::ArchMismatch(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated { offset: self.bytes.len() }),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_f32_precision() {
        let mut model = CodecModel::init(HftConfig::tiny(), 5).unwrap();
        model.params.round_to_f32();
        let ck = Checkpoint::new(model, 3, 0.013);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LHFW");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn rejects_damage() {
        let ck = Checkpoint::new(CodecModel::init(HftConfig::tiny(), 5).unwrap(), 0, 0.0018);
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
