//! Binary checkpoint format.
//!
//! Little-endian layout, no padding:
//!
//! ```text
//! magic "KQCK" (4 bytes)
//! version u32 = 1
//! tensor count u32
//! per tensor:
//!   name length u32, UTF-8 name
//!   dtype u8 (0 = FP32, 1 = INT8)
//!   rank u8, dims as u64 each
//!   INT8 only: scale f32
//!   raw row-major data (f32 or i8)
//! ```
//!
//! Decoding is strict: bad magic, version, dtype, truncation, or trailing
//! bytes all fail with the byte offset, and no partial model is returned.
//! Activation-calibrator state rides along as `qat.act.<site>` entries of
//! shape `[1]` holding the running max-abs; single-element tensors
//! round-trip INT8 quantization exactly, so calibration survives
//! `quantize` unchanged.

use std::collections::BTreeMap;
use std::path::Path;

use kurtq_core::model::ModelParams;
use kurtq_core::quant::{self, QTensor};
use kurtq_core::Tensor;
use thiserror::Error;

use crate::CliError;

pub const MAGIC: [u8; 4] = *b"KQCK";
pub const VERSION: u32 = 1;

/// Prefix of the entries that persist activation calibration.
pub const ACT_PREFIX: &str = "qat.act.";

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic at byte 0 (not a KQCK checkpoint)")]
    BadMagic,
    #[error("unsupported version {got} at byte {offset}")]
    BadVersion { offset: usize, got: u32 },
    #[error("truncated: needed {needed} byte(s) at byte {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor name at byte {offset} is not UTF-8")]
    BadName { offset: usize },
    #[error("unknown dtype {got} at byte {offset}")]
    BadDtype { offset: usize, got: u8 },
    #[error("non-positive scale at byte {offset}")]
    BadScale { offset: usize },
    #[error("{extra} trailing byte(s) at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("tensor data at byte {offset} is malformed: {what}")]
    BadTensor { offset: usize, what: String },
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Io(e.to_string())
    }
}

/// A stored tensor: full precision or quantized.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    I8(QTensor),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::I8(q) => q.shape(),
        }
    }

    /// FP32 view: identity for FP32 entries, dequantization for INT8.
    pub fn to_f32(&self) -> Tensor {
        match self {
            TensorData::F32(t) => t.clone(),
            TensorData::I8(q) => quant::dequantize(q),
        }
    }
}

/// Ordered named tensors as stored on disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, TensorData)>,
}

impl Checkpoint {
    /// Builds an FP32 checkpoint from model parameters plus activation
    /// calibration (running max-abs per site).
    pub fn from_model(params: &ModelParams, act_absmax: &BTreeMap<String, f32>) -> Self {
        let mut entries: Vec<(String, TensorData)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), TensorData::F32(t.clone())))
            .collect();
        for (site, absmax) in act_absmax {
            entries.push((
                format!("{ACT_PREFIX}{site}"),
                TensorData::F32(Tensor::scalar(*absmax)),
            ));
        }
        Checkpoint { entries }
    }

    /// Splits into model parameters (INT8 entries dequantized) and the
    /// persisted activation calibration.
    pub fn into_model(self) -> (ModelParams, BTreeMap<String, f32>) {
        let mut params = ModelParams::new();
        let mut act = BTreeMap::new();
        for (name, data) in self.entries {
            if let Some(site) = name.strip_prefix(ACT_PREFIX) {
                let t = data.to_f32();
                act.insert(site.to_string(), t.data()[0]);
            } else {
                params.insert(&name, data.to_f32());
            }
        }
        (params, act)
    }

    pub fn is_quantized(&self) -> bool {
        self.entries.iter().any(|(_, d)| matches!(d, TensorData::I8(_)))
    }

    /// Quantizes every tensor with its per-tensor max-abs scale.
    pub fn quantize(&self) -> Checkpoint {
        let entries = self
            .entries
            .iter()
            .map(|(name, data)| {
                let t = data.to_f32();
                let scale = quant::compute_scale_maxabs(&t);
                let q = quant::quantize(&t, scale).expect("max-abs scale is positive");
                (name.clone(), TensorData::I8(q))
            })
            .collect();
        Checkpoint { entries }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    for (name, data) in &ckpt.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match data {
            TensorData::F32(t) => {
                out.push(0u8);
                out.push(t.shape().len() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorData::I8(q) => {
                out.push(1u8);
                out.push(q.shape().len() as u8);
                for &d in q.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                out.extend_from_slice(&q.scale().to_le_bytes());
                out.extend(q.values().iter().map(|&v| v as u8));
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version_offset = r.pos;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::BadVersion {
            offset: version_offset,
            got: version,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(bytes.len()));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_offset = r.pos;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::BadName { offset: name_offset })?
            .to_string();
        let dtype_offset = r.pos;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        let data_offset = r.pos;
        let data = match dtype {
            0 => {
                let raw = r.take(numel * 4)?;
                let values: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorData::F32(Tensor::new(shape, values).map_err(|e| {
                    FormatError::BadTensor {
                        offset: data_offset,
                        what: e.to_string(),
                    }
                })?)
            }
            1 => {
                let scale_offset = r.pos;
                let scale = r.f32()?;
                if !(scale > 0.0) {
                    return Err(FormatError::BadScale { offset: scale_offset });
                }
                let raw = r.take(numel)?;
                let values: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
                TensorData::I8(QTensor::from_parts(shape, values, scale).map_err(|e| {
                    FormatError::BadTensor {
                        offset: data_offset,
                        what: e.to_string(),
                    }
                })?)
            }
            other => {
                return Err(FormatError::BadDtype {
                    offset: dtype_offset,
                    got: other,
                })
            }
        };
        entries.push((name, data));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        });
    }
    Ok(Checkpoint { entries })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CliError> {
    std::fs::write(path, encode(ckpt))
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use kurtq_core::model::{init_random, ModelConfig};
    use kurtq_core::rng::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            num_blocks: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            vocab: 8,
            seq_len: 4,
            num_classes: 3,
        };
        let params = init_random(&mut Rng::new(7), &cfg).unwrap();
        let mut act = BTreeMap::new();
        act.insert("block0.attn.in".to_string(), 1.75f32);
        act.insert("head.in".to_string(), 0.5f32);
        Checkpoint::from_model(&params, &act)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample_checkpoint();
        let bytes = encode(&ckpt);
        let back = decode(&bytes).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(bytes, encode(&back));
    }

    #[test]
    fn split_restores_params_and_calibration() {
        let ckpt = sample_checkpoint();
        let (params, act) = ckpt.into_model();
        assert!(params.get("embed.w").is_ok());
        assert!(params.get("qat.act.head.in").is_err());
        assert_eq!(act["block0.attn.in"], 1.75);
        assert_eq!(act["head.in"], 0.5);
    }

    #[test]
    fn bad_magic_is_positioned() {
        let mut bytes = encode(&sample_checkpoint());
        bytes[0] = b'X';
        assert_eq!(decode(&bytes), Err(FormatError::BadMagic));
    }

    #[test]
    fn bad_version_is_positioned() {
        let mut bytes = encode(&sample_checkpoint());
        bytes[4] = 9;
        assert_eq!(
            decode(&bytes),
            Err(FormatError::BadVersion { offset: 4, got: 9 })
        );
    }

    #[test]
    fn truncation_is_positioned_everywhere() {
        let bytes = encode(&sample_checkpoint());
        // Any prefix must fail with a Truncated error, never panic or
        // return a partial model.
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(FormatError::Truncated { offset, needed }) => {
                    assert!(offset <= cut);
                    assert!(needed > 0);
                }
                Err(FormatError::BadMagic) => assert!(cut < 4),
                other => panic!("cut at {cut}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample_checkpoint());
        let len = bytes.len();
        bytes.push(0);
        assert_eq!(
            decode(&bytes),
            Err(FormatError::TrailingBytes { offset: len, extra: 1 })
        );
    }

    #[test]
    fn unknown_dtype_rejected() {
        let mut ck = Checkpoint::default();
        ck.entries
            .push(("x".to_string(), TensorData::F32(Tensor::scalar(1.0))));
        let mut bytes = encode(&ck);
        // dtype byte sits right after count(4+4+4) + name_len(4) + name(1).
        let dtype_pos = 4 + 4 + 4 + 4 + 1;
        bytes[dtype_pos] = 7;
        assert_eq!(
            decode(&bytes),
            Err(FormatError::BadDtype { offset: dtype_pos, got: 7 })
        );
    }

    #[test]
    fn int8_round_trip_preserves_scale_and_values() {
        let ckpt = sample_checkpoint();
        let q = ckpt.quantize();
        assert!(q.is_quantized());
        let bytes = encode(&q);
        let back = decode(&bytes).unwrap();
        assert_eq!(q, back);
        // Single-element calibration entries survive exactly.
        let (_, act) = back.into_model();
        assert_eq!(act["block0.attn.in"], 1.75);

        // Round trip of weights stays within scale/2 of the original.
        let (orig, _) = ckpt.into_model();
        let (deq, _) = q.into_model();
        for (name, t) in orig.iter() {
            let d = deq.get(name).unwrap();
            let scale = quant::compute_scale_maxabs(t);
            for (a, b) in t.data().iter().zip(d.data()) {
                assert!(
                    (a - b).abs() <= 0.5 * scale * (1.0 + 1e-4),
                    "{name}: {a} vs {b}"
                );
            }
        }
    }
}
