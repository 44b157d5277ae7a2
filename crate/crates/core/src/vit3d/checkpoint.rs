//! Versioned binary checkpoints, little-endian:
//! magic, version (u32), config JSON (u32 length + bytes), step (u64),
//! array count (u32), then per array: name (u32 length + UTF-8), rank (u32),
//! extents (u64 each), elements (f64 each).

use super::{ModelConfig, ModelError, ModelParams};
use crate::numcore::{NdArray, Real};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VOLTACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    /// Named arrays; model parameters are prefixed `student.` or `teacher.`.
    pub arrays: Vec<(String, NdArray)>,
}

impl Checkpoint {
    pub fn from_models(config: &ModelConfig, step: u64, student: &ModelParams, teacher: &ModelParams) -> Self {
        let mut arrays = Vec::with_capacity(2 * student.len());
        for (prefix, m) in [("student", student), ("teacher", teacher)] {
            arrays.extend(m.named().into_iter().map(|(n, a)| (format!("{prefix}.{n}"), a.clone())));
        }
        Self { config: config.clone(), step, arrays }
    }

    pub fn push(&mut self, name: impl Into<String>, array: NdArray) {
        self.arrays.push((name.into(), array));
    }

    pub fn array(&self, name: &str) -> Option<&NdArray> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Parameters stored under `prefix.` (e.g. "student", "teacher").
    pub fn model(&self, prefix: &str) -> Result<ModelParams, ModelError> {
        self.model_as(prefix, &self.config)
    }

    /// Load `prefix.` parameters against an externally supplied config,
    /// reporting any name or shape disagreement.
    pub fn model_as(&self, prefix: &str, cfg: &ModelConfig) -> Result<ModelParams, ModelError> {
        let lead = format!("{prefix}.");
        let arrays =
            self.arrays.iter().filter_map(|(n, a)| n.strip_prefix(&lead).map(|s| (s.to_string(), a.clone()))).collect();
        ModelParams::from_named(cfg, arrays)
    }
}

pub fn write_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&c.config).expect("model config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&c.step.to_le_bytes());
    out.extend_from_slice(&(c.arrays.len() as u32).to_le_bytes());
    for (name, a) in &c.arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in a.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                ModelError::Checkpoint(format!("truncated at byte {}: need {n} more bytes", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:?} at byte 0")));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| ModelError::Checkpoint(format!("config at byte 16: {e}")))?;
    let step = cur.u64()?;
    let count = cur.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| ModelError::Checkpoint(format!("array name at byte {}: {e}", cur.pos)))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| ModelError::Checkpoint(format!("array {name} shape {shape:?} overflows")))?;
        let raw = cur.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real).collect();
        arrays.push((name, NdArray::from_vec(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes after byte {}", bytes.len() - cur.pos, cur.pos)));
    }
    Ok(Checkpoint { config, step, arrays })
}
