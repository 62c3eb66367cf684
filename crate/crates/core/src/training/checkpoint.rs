//! Binary container of named tensors plus the JSON config that produced them.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TALR" | version u32 | config_len u64 | config JSON
//! | tensor_count u32
//! | per tensor: name_len u32 | name UTF-8 | dtype u8 | rank u32 | dims u64 × rank | payload
//! ```
//!
//! dtype 0 stores 32-bit floats (widened on load), dtype 1 stores 64-bit
//! floats. Payloads are row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TALR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    /// Tensors in file order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Self {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.detached()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::arg(format!("checkpoint has no tensor named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype.code());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match dtype {
                Dtype::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
                Dtype::F64 => t.data().iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let config_len = r.u64("config length")? as usize;
        let config_at = r.pos;
        let config = serde_json::from_slice(r.take(config_len, "config")?).map_err(|e| Error::Format {
            offset: config_at as u64,
            message: format!("config JSON: {e}"),
        })?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| Error::Format {
                offset: name_at as u64,
                message: "tensor name is not UTF-8".into(),
            })?;
            let code_at = r.pos;
            let dtype = match r.take(1, "dtype")?[0] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                c => {
                    return Err(Error::Format {
                        offset: code_at as u64,
                        message: format!("unknown dtype code {c}"),
                    })
                }
            };
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let payload_at = r.pos;
            let len = numel.and_then(|n| n.checked_mul(dtype.width())).ok_or_else(|| Error::Format {
                offset: payload_at as u64,
                message: format!("tensor {name} has an impossible shape {shape:?}"),
            })?;
            let raw = r.take(len, "payload")?;
            let data: Vec<f64> = match dtype {
                Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: payload_at as u64,
                message: format!("tensor {name}: {e}"),
            })?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { config, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, dtype: Dtype) -> Result<()> {
    let bytes = ckpt.to_bytes(dtype)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
