//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VCSL"            4 bytes
//! version           u32
//! stages done       u32 bitmask (bit 0 = stage 1)
//! cursor stage      u32
//! cursor epoch      u64
//! corpus seed       u64
//! blob count        u32
//! per blob:
//!   name length     u32, then UTF-8 name
//!   rank            u32, then rank x u64 dims
//!   values          f64 bits per element
//! checksum          u64, FNV-1a over every preceding byte
//! ```
//!
//! Blob names are the model's parameter names (`encoder.conv0.weight`,
//! `prototypes`, `attention.block0.wq`, `decoder.weight`, `mask.token`, ...).

use std::path::Path;

use vcsl_core::autodiff::Tensor;
use vcsl_core::scalar::Scalar;
use vcsl_core::training::{ModelState, Progress};

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"VCSL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub progress: Progress,
    pub corpus_seed: u64,
    pub blobs: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(state: &ModelState<T>, corpus_seed: u64) -> Self {
        let blobs = state
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect()))
            .collect();
        Self { progress: state.progress, corpus_seed, blobs }
    }

    /// Copies every blob into `state`, which must have exactly the same
    /// parameter names and shapes.
    pub fn restore<T: Scalar>(&self, state: &mut ModelState<T>) -> Result<(), CliError> {
        let mut targets = state.named_tensors_mut();
        if targets.len() != self.blobs.len() {
            return Err(CliError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.blobs.len(),
                targets.len()
            )));
        }
        for ((name, tensor), (bname, shape, values)) in targets.iter_mut().zip(&self.blobs) {
            if name != bname || tensor.shape() != shape.as_slice() {
                return Err(CliError::Checkpoint(format!(
                    "tensor `{bname}` {shape:?} does not match model tensor `{name}` {:?}",
                    tensor.shape()
                )));
            }
            **tensor = Tensor::from_vec(shape, values.iter().map(|&v| T::of(v)).collect());
        }
        state.progress = self.progress;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.progress.bitmask().to_le_bytes());
        out.extend_from_slice(&u32::from(self.progress.stage).to_le_bytes());
        out.extend_from_slice(&(self.progress.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.corpus_seed.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, shape, values) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: &str| CliError::Checkpoint(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut r = Reader { bytes, at: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!(
                "checkpoint format version {version}, this build reads {VERSION}"
            )));
        }
        if bytes.len() < 12 {
            return Err(bad("truncated checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(bad("checksum mismatch"));
        }
        r.bytes = body;
        let mask = r.u32()?;
        let stage = u8::try_from(r.u32()?).map_err(|_| bad("stage out of range"))?;
        let epoch = r.u64()? as usize;
        let corpus_seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("blob name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("blob too large"))?;
            let values = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?;
            blobs.push((name, shape, values));
        }
        if r.at != body.len() {
            return Err(bad("trailing bytes after the last blob"));
        }
        Ok(Self { progress: Progress::from_bitmask(mask, stage, epoch), corpus_seed, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
