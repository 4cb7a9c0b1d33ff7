//! Resumable optimizer state saved next to epoch checkpoints.
//!
//! Layout, little-endian: `HPS1`, u32 version, u64 completed epochs, u64
//! iterations, u64 Adam steps, u64 moment count, then for every moment pair
//! its rank, dims and both value arrays as f64. Then u64 pair count and per
//! pair a presence byte; present entries carry the refresh epoch and the
//! `4×d` fused answer embeddings.

use std::path::Path;

use super::PipelineError;
use crate::numerics::{AdamConfig, AdamState, Tensor};

const MAGIC: [u8; 4] = *b"HPS1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub iteration: usize,
    pub adam: AdamState,
    /// Per pair: epoch of the last refresh and the fused-image answer
    /// embeddings computed then.
    pub fused_text: Vec<Option<(usize, Tensor)>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.bytes.len() < n {
            return Err(PipelineError::Resume("truncated training state".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, PipelineError> {
        usize::try_from(self.u64()?).map_err(|_| PipelineError::Resume("count out of range".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PipelineError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| PipelineError::Resume("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn put_tensor_values(out: &mut Vec<u8>, t: &Tensor) {
    t.data().iter().for_each(|v| out.extend(v.to_le_bytes()));
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        for v in [self.epoch as u64, self.iteration as u64, self.adam.step_count()] {
            out.extend(v.to_le_bytes());
        }
        let (m, v) = (self.adam.first_moment(), self.adam.second_moment());
        out.extend((m.len() as u64).to_le_bytes());
        for (m, v) in m.iter().zip(v) {
            out.extend((m.ndim() as u64).to_le_bytes());
            m.shape().iter().for_each(|&d| out.extend((d as u64).to_le_bytes()));
            put_tensor_values(&mut out, m);
            put_tensor_values(&mut out, v);
        }
        out.extend((self.fused_text.len() as u64).to_le_bytes());
        for entry in &self.fused_text {
            match entry {
                None => out.push(0),
                Some((epoch, t)) => {
                    out.push(1);
                    out.extend((*epoch as u64).to_le_bytes());
                    out.extend((t.shape()[0] as u64).to_le_bytes());
                    out.extend((t.shape()[1] as u64).to_le_bytes());
                    put_tensor_values(&mut out, t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], adam: AdamConfig) -> Result<Self, PipelineError> {
        let mut r = Reader { bytes };
        if r.take(4)? != MAGIC {
            return Err(PipelineError::Resume("not a training state file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(PipelineError::Resume(format!("unsupported training state version {version}")));
        }
        let (epoch, iteration, steps) = (r.usize()?, r.usize()?, r.u64()?);
        let count = r.usize()?;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let rank = r.usize()?;
            if rank > 8 {
                return Err(PipelineError::Resume(format!("tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| PipelineError::Resume("size overflow".into()))?;
            first.push(Tensor::new(shape.clone(), r.f64s(n)?)?);
            second.push(Tensor::new(shape, r.f64s(n)?)?);
        }
        let adam = AdamState::from_parts(adam, first, second, steps)?;
        let pairs = r.usize()?;
        let mut fused_text = Vec::with_capacity(pairs.min(1 << 20));
        for _ in 0..pairs {
            match r.take(1)?[0] {
                0 => fused_text.push(None),
                1 => {
                    let refreshed = r.usize()?;
                    let (q, d) = (r.usize()?, r.usize()?);
                    let n = q.checked_mul(d).ok_or_else(|| PipelineError::Resume("size overflow".into()))?;
                    fused_text.push(Some((refreshed, Tensor::new([q, d], r.f64s(n)?)?)));
                }
                other => return Err(PipelineError::Resume(format!("bad presence byte {other}"))),
            }
        }
        if !r.bytes.is_empty() {
            return Err(PipelineError::Resume(format!("{} trailing bytes in training state", r.bytes.len())));
        }
        Ok(Self { epoch, iteration, adam, fused_text })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        crate::fusenet::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, adam: AdamConfig) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Resume(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, adam)
    }
}
