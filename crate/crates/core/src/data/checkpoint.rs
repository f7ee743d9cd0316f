//! Versioned little-endian checkpoint files.
//!
//! Layout: `"SAOL"`, `u32` version, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, `u32` rank, `u32` extents and the
//! `f32` payload. Optimizer state is stored as tensors named
//! `momentum/<param>`. A trailer holds `u64` epoch, step and seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SaolError};
use crate::params::Param;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SAOL";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

/// Everything needed to resume training at an epoch boundary. The data
/// order of later epochs is derived from `seed` and `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Param>,
    pub momentum: Vec<Param>,
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
}

fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(ck.params.len() + ck.momentum.len())
        .map_err(|_| SaolError::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let named = ck
        .params
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .chain(ck.momentum.iter().map(|p| (format!("{MOMENTUM_PREFIX}{}", p.name), &p.value)));
    for (name, t) in named {
        let len = |v: usize| u32::try_from(v).map_err(|_| SaolError::Format(format!("{name}: size {v} exceeds u32")));
        out.extend_from_slice(&len(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&len(t.rank())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&len(d)?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for v in [ck.epoch, ck.step, ck.seed] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| SaolError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(SaolError::Format("not a checkpoint: bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(SaolError::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = r.u32()?;
    let (mut params, mut momentum) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| SaolError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let payload = r.take(
            numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| SaolError::Format(format!("{name}: shape {shape:?} overflows")))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| SaolError::Format(format!("{name}: {e}")))?;
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(base) => momentum.push(Param {
                name: base.to_string(),
                value,
            }),
            None => params.push(Param { name, value }),
        }
    }
    let (epoch, step, seed) = (r.u64()?, r.u64()?, r.u64()?);
    if r.pos != bytes.len() {
        return Err(SaolError::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        params,
        momentum,
        epoch,
        step,
        seed,
    })
}

/// Writes through a temporary file in the target directory and renames it
/// into place. Values are stored as `f32`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| SaolError::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| SaolError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| SaolError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| SaolError::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| SaolError::io(path, e))?;
    decode(&bytes)
}
