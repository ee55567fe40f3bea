use std::path::Path;

use fsc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::digest::{fnv1a64, json_digest};
use crate::encoders::{inverse_temperature_value, EncoderConfig, ParamStore};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const VERSION: u32 = 1;

/// Provenance stored after the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    /// Clamped `1/τ` at save time.
    pub inv_temperature: f64,
    /// Digest of the configuration that produced the weights.
    pub config_digest: u64,
    pub encoder: EncoderConfig,
    pub encoder_digest: u64,
    /// Interpolation ratio when the checkpoint is a merge.
    pub alpha: Option<f64>,
}

/// Encoder weights plus metadata. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    params: ParamStore,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(encoder: &EncoderConfig, params: ParamStore, step: u64, seed: u64, config_digest: u64) -> Result<Self> {
        params.check_layout(encoder)?;
        let meta = CheckpointMeta {
            step,
            seed,
            inv_temperature: inverse_temperature_value(&params),
            config_digest,
            encoder: encoder.clone(),
            encoder_digest: json_digest(encoder)?,
            alpha: None,
        };
        Ok(Self { params, meta })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.meta.encoder
    }

    pub fn with_config_digest(mut self, digest: u64) -> Self {
        self.meta.config_digest = digest;
        self
    }

    /// Fails unless the stored config digest equals `expected`.
    pub fn verify_config(&self, expected: u64) -> Result<()> {
        if self.meta.config_digest != expected {
            return Err(Error::Config(format!(
                "checkpoint config digest {:016x} does not match {expected:016x}",
                self.meta.config_digest
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::InvalidInput(format!("name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::InvalidInput(format!("rank too large: {name}")))?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_owned();
            let rank = usize::from(r.take(1)?[0]);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("dimension overflow"))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| corrupt("dimension overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push((name, Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if json_digest(&meta.encoder)? != meta.encoder_digest {
            return Err(corrupt("encoder digest does not match its config"));
        }
        let params = ParamStore::from_entries(entries).map_err(|e| corrupt(&e.to_string()))?;
        params.check_layout(&meta.encoder)?;
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// FNV-1a of the serialized form.
    pub fn digest(&self) -> Result<u64> {
        Ok(fnv1a64(&self.to_bytes()?))
    }
}

fn corrupt(why: &str) -> Error {
    Error::CorruptFile(why.to_owned())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// WiSE-FT: `θ = (1-α)·θ_pre + α·θ_ft` entrywise, evaluated in `f64`.
///
/// `α = 0` and `α = 1` return exact copies of the endpoints.
pub fn wise_ft_interpolate(pre: &Checkpoint, ft: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    if !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("alpha must be finite, got {alpha}")));
    }
    if pre.meta.encoder != ft.meta.encoder || pre.params.len() != ft.params.len() {
        return Err(Error::StructureMismatch("checkpoints have different encoder layouts".into()));
    }
    let mut entries = Vec::with_capacity(pre.params.len());
    for ((na, a), (nb, b)) in pre.params.iter().zip(ft.params.iter()) {
        if na != nb || a.shape() != b.shape() {
            return Err(Error::StructureMismatch(format!("{na} {:?} vs {nb} {:?}", a.shape(), b.shape())));
        }
        let data = if alpha == 0.0 {
            a.data().to_vec()
        } else if alpha == 1.0 {
            b.data().to_vec()
        } else {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| ((1.0 - alpha) * f64::from(x) + alpha * f64::from(y)) as f32)
                .collect()
        };
        entries.push((na.to_owned(), Tensor::new(a.shape().to_vec(), data)?));
    }
    let params = ParamStore::from_entries(entries)?;
    let mut out = Checkpoint::new(&ft.meta.encoder, params, ft.meta.step, ft.meta.seed, ft.meta.config_digest)?;
    out.meta.alpha = Some(alpha);
    Ok(out)
}
