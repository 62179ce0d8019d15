//! Binary checkpoints: parameters, optimizer moments, step and config.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCRFCKPT" u32 version  u64 step
//! u32 len, config text
//! u32 count, then per tensor: u32 len, name, u32 rank, u64 dims.., u64 offset
//! f32 payload (offsets count floats from its start)
//! ```
//!
//! Optimizer moments are stored as tensors named `opt.m/<param>` and
//! `opt.v/<param>`.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCRFCKPT";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: ModelConfig,
    pub params: Params<f32>,
    /// Present when the checkpoint was written during training.
    pub adam: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        let moments: Vec<(String, Tensor<f32>)> = match &self.adam {
            None => Vec::new(),
            Some(adam) => {
                if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
                    return Err(Error::Argument("checkpoint: optimizer state does not match parameters".into()));
                }
                let mut out = Vec::new();
                for (prefix, state) in [(M_PREFIX, &adam.m), (V_PREFIX, &adam.v)] {
                    for ((name, t), data) in self.params.iter().zip(state.iter()) {
                        out.push((format!("{prefix}{name}"), Tensor::new(t.shape(), data.clone())?));
                    }
                }
                out
            }
        };
        entries.extend(moments.iter().map(|(n, t)| (n.clone(), t)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        let text = self.config.to_text();
        out.extend((text.len() as u32).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend((entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            out.extend(offset.to_le_bytes());
            offset += t.numel() as u64;
        }
        for (_, t) in &entries {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "not a checkpoint"));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let step = r.u64("step")?;
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::format(at, "config is not UTF-8"))?;
        let config = ModelConfig::parse(text).map_err(|e| Error::format(at, e.to_string()))?;
        let count = r.u32("entry count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::format(at, "name is not UTF-8"))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let at = r.pos;
            let offset = r.u64("offset")? as usize;
            manifest.push((name.to_string(), shape, offset, at));
        }
        let payload = r.pos;
        let floats = (bytes.len() - payload) / 4;
        let mut params = Params::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut expected = 0usize;
        for (name, shape, offset, at) in manifest {
            let n: usize = shape.iter().product();
            if offset != expected || offset + n > floats {
                return Err(Error::format(at, format!("{name}: bad offset {offset} for {n} values")));
            }
            expected += n;
            let start = payload + 4 * offset;
            let data: Vec<f32> = bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m.push((p.to_string(), data));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v.push((p.to_string(), data));
            } else {
                params.insert(name.clone(), Tensor::new(shape, data)?).map_err(|e| Error::format(at, e.to_string()))?;
            }
        }
        if payload + 4 * expected != bytes.len() {
            return Err(Error::format(payload + 4 * expected, "trailing bytes after the payload"));
        }
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let names: Vec<&str> = params.names().collect();
            let aligned = |s: &[(String, Vec<f32>)]| s.len() == names.len() && s.iter().zip(&names).all(|(a, b)| a.0 == *b);
            if !aligned(&m) || !aligned(&v) {
                return Err(Error::format(payload, "optimizer moments do not match the parameters"));
            }
            Some(Adam {
                beta1: config.adam_beta1,
                beta2: config.adam_beta2,
                eps: config.adam_eps,
                step,
                m: m.into_iter().map(|(_, d)| d).collect(),
                v: v.into_iter().map(|(_, d)| d).collect(),
            })
        };
        Ok(Checkpoint { step, config, params, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.encode()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.pos, format!("truncated {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}
