//! Binary model files.
//!
//! Layout, all integers `u32` little-endian: magic `HPF1`, format version,
//! channels, scales, embedding dim, block count, tensor count; then per
//! tensor its name length, UTF-8 name, rank, extents and `f32` LE values.
//! The attention width is read back from the first query projection.

use std::io::Write;
use std::path::Path;

use super::{Architecture, FusenetError, FusionModel};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"HPF1";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

impl FusionModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.param_count());
        out.extend_from_slice(&MAGIC);
        let a = self.arch();
        for v in [FORMAT_VERSION, a.channels as u32, a.scales as u32, a.embed_dim as u32, a.blocks as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params().len() as u32).to_le_bytes());
        for (name, t) in self.names().iter().zip(self.params()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FusenetError> {
        if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
            return Err(FusenetError::Format("bad magic".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(FusenetError::Format(format!("unsupported format version {version}")));
        }
        let channels = r.u32("header")? as usize;
        let scales = r.u32("header")? as usize;
        let embed_dim = r.u32("header")? as usize;
        let blocks = r.u32("header")? as usize;
        let count = r.u32("tensor count")? as usize;
        let mut named = Vec::new();
        for i in 0..count {
            let len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| FusenetError::Corrupt(format!("tensor {i}: name is not UTF-8")))?
                .to_owned();
            let rank = r.u32("tensor rank")? as usize;
            if rank > MAX_RANK {
                return Err(FusenetError::Corrupt(format!("{name}: rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| FusenetError::Corrupt(format!("{name}: truncated values")))?;
            let data = r
                .take(4 * numel, "tensor values")?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect();
            named.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(FusenetError::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        let attn_dim = named
            .iter()
            .find(|(n, _)| n == "attn0.w_q")
            .and_then(|(_, t)| t.shape().get(1).copied())
            .ok_or_else(|| FusenetError::Consistency("missing attn0.w_q".into()))?;
        let arch = Architecture { channels, scales, embed_dim, attn_dim, blocks };
        FusionModel::from_named(arch, named)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FusenetError> {
        if n > self.remaining() {
            return Err(FusenetError::Corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FusenetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn save_model(path: &Path, model: &FusionModel) -> Result<(), FusenetError> {
    write_atomic(path, &model.to_bytes())?;
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

pub fn load_model(path: &Path) -> Result<FusionModel, FusenetError> {
    FusionModel::from_bytes(&std::fs::read(path)?)
}
