//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "DIVRCKPT"
//! version      u32      currently 1
//! dtype        u32      4 = f32, 8 = f64
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON (config text, hashes, step)
//! count        u32      number of tensors
//! directory    count x { name_len u16, name bytes, rows u32, cols u32, offset u64 }
//! data         tensors in row-major order; offsets are element offsets
//!              from the start of the data section
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Dtype;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DIVRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Run metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Canonical config text of the run that wrote the checkpoint.
    pub config: String,
    pub config_hash: String,
    pub scene_hash: String,
    /// Optimizer steps taken so far.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Array2<f64>)>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let width: u32 = match self.dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&width.to_le_bytes());
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| ck_err("metadata too large"))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| ck_err(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for &v in t.iter() {
                match self.dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ck_err("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ck_err(format!("unsupported format version {version}")));
        }
        let dtype = match r.u32()? {
            4 => Dtype::F32,
            8 => Dtype::F64,
            w => return Err(ck_err(format!("unsupported element width {w}"))),
        };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| ck_err("tensor name is not UTF-8"))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let offset = r.u64()? as usize;
            dir.push((name, rows, cols, offset));
        }
        let data = &bytes[r.pos..];
        let width = if dtype == Dtype::F32 { 4 } else { 8 };
        let mut tensors = Vec::with_capacity(count);
        for (name, rows, cols, offset) in dir {
            let n = rows.checked_mul(cols).ok_or_else(|| ck_err("tensor shape overflows"))?;
            let start = offset.checked_mul(width).ok_or_else(|| ck_err("offset overflows"))?;
            let end = start + n * width;
            let raw = data.get(start..end).ok_or_else(|| ck_err(format!("tensor {name} runs past the end of the file")))?;
            let values: Vec<f64> = raw
                .chunks_exact(width)
                .map(|c| match dtype {
                    Dtype::F32 => f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))),
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            let t = Array2::from_shape_vec((rows, cols), values).map_err(|e| ck_err(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { dtype, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ck_err("truncated header"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dtype: Dtype) -> Checkpoint {
        Checkpoint {
            dtype,
            meta: CheckpointMeta { config: "seed = 1\n".into(), config_hash: "ab".into(), scene_hash: "cd".into(), step: 12 },
            tensors: vec![
                ("w".into(), Array2::from_shape_fn((2, 3), |(i, j)| i as f64 - 0.1 * j as f64)),
                ("b".into(), Array2::from_elem((1, 3), 1.0 / 3.0)),
                ("empty".into(), Array2::zeros((0, 4))),
            ],
        }
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = sample(Dtype::F64);
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn f32_round_trip_rounds_values() {
        let c = sample(Dtype::F32);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        let b = back.tensor("b").unwrap();
        assert_eq!(b[[0, 0]], f64::from((1.0f64 / 3.0) as f32));
    }

    #[test]
    fn header_layout_is_stable() {
        let bytes = sample(Dtype::F32).to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample(Dtype::F64).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
