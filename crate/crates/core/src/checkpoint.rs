//! Versioned binary checkpoints ("RSFL" format).
//!
//! Layout, all integers little-endian:
//!   magic "RSFL" | u32 version | u32 metadata length + UTF-8 JSON metadata |
//!   u32 tensor count | per tensor: u16 name length + name, u8 rank,
//!   u32 dims, f64 values | u32 CRC32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Network;
use crate::tensor::Tensor;
use crate::zoo::BottleneckConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RSFL";

/// Run context carried alongside the tensors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct CheckpointMeta {
    pub arch: String,
    pub cut_layer: usize,
    pub bottleneck: Option<BottleneckConfig>,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: CheckpointMeta) -> Self {
        let tensors = net
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, t.clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Restore parameter values into `net`, failing on any missing tensor or
    /// shape mismatch and naming the offending tensor.
    pub fn load_into(&self, net: &mut Network) -> Result<()> {
        for (name, slot) in net.named_params_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::CheckpointMissingTensor { name: name.clone() })?;
            if stored.shape() != slot.shape() {
                return Err(Error::CheckpointTensorShape {
                    name,
                    expected: slot.shape().to_vec(),
                    got: stored.shape().to_vec(),
                });
            }
            slot.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    // Write-temp-then-rename keeps partially written files invisible.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let p = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    let truncated = |detail: &str| Error::CheckpointTruncated {
        path: p.clone(),
        detail: detail.to_string(),
    };
    if buf.len() < 4 + 4 + 4 + 4 {
        return Err(truncated("file shorter than the fixed header"));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::CheckpointBadMagic { path: p });
    }
    let payload_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[payload_len..].try_into().unwrap());
    let computed = crc32(&buf[..payload_len]);
    if stored != computed {
        return Err(Error::CheckpointChecksum {
            path: p,
            stored,
            computed,
        });
    }
    let mut cur = Cursor {
        buf: &buf[..payload_len],
        pos: 4,
        path: &p,
    };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            path: p,
            got: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = cur.u32()? as usize;
    let meta_bytes = cur.bytes(meta_len, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::CheckpointTruncated {
            path: p.clone(),
            detail: format!("metadata is not valid JSON: {e}"),
        })?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cur.u16()? as usize;
        let name_bytes = cur.bytes(name_len, "tensor name")?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::CheckpointTruncated {
            path: p.clone(),
            detail: format!("tensor {i} name is not UTF-8"),
        })?;
        let rank = cur.bytes(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.bytes(n * 8, "tensor values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != payload_len {
        return Err(truncated("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint { meta, tensors })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated {
                path: self.path.to_string(),
                detail: format!("while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, "u16")?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, "u32")?.try_into().unwrap()))
    }
}

/// CRC-32 (IEEE 802.3), table-driven.
pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}
