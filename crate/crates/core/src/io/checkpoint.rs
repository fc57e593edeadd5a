//! The `LLM1` model checkpoint: encoder plus both decoders.
//!
//! Layout, all values little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LLM1"
//! 4       4     in_dim   (u32)
//! 8       4     out_dim  (u32)
//! 12      4     rank     (u32)
//! 16      4     hidden   (u32)
//! 20      4     layer    (u32)
//! 24      4     scale    (f32)
//! 28      4     tau      (f32)
//! 32      ..    f32 payload: base, bias, A, B, detection head, quality head
//! ```

use std::fs;
use std::path::Path;

use super::stack::Cursor;
use crate::adapter::LoraLinear;
use crate::error::{Error, Result};
use crate::heads::{DetectionHead, QualityHead};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LLM1";
/// Bytes of fixed header following the magic.
pub const CHECKPOINT_HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointHeader {
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub hidden: usize,
    pub layer: usize,
    pub scale: f32,
    pub tau: f32,
}

impl CheckpointHeader {
    /// Payload sections in file order, as (name, f32 count).
    pub fn sections(&self) -> [(&'static str, usize); 6] {
        let (i, o, r, h) = (self.in_dim, self.out_dim, self.rank, self.hidden);
        [
            ("base", o * i),
            ("bias", o),
            ("lora_a", r * i),
            ("lora_b", o * r),
            ("detection", DetectionHead::param_count(o, h)),
            ("quality", QualityHead::param_count(o, h)),
        ]
    }

    pub fn payload_len(&self) -> usize {
        self.sections().iter().map(|s| s.1).sum::<usize>() * 4
    }
}

/// A trained model. Parameters are held in f64 but persisted as f32; a
/// checkpoint read back from disk re-serializes to identical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layer: usize,
    pub tau: f64,
    pub encoder: LoraLinear,
    pub detection: DetectionHead,
    pub quality: QualityHead,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            in_dim: self.encoder.in_dim(),
            out_dim: self.encoder.out_dim(),
            rank: self.encoder.rank(),
            hidden: self.detection.hidden(),
            layer: self.layer,
            scale: self.encoder.scale() as f32,
            tau: self.tau as f32,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = self.header();
        if self.detection.in_dim() != h.out_dim
            || self.quality.in_dim() != h.out_dim
            || self.quality.hidden() != h.hidden
        {
            return Err(Error::invalid("decoder shapes disagree with the encoder"));
        }
        let mut out = Vec::with_capacity(4 + CHECKPOINT_HEADER_LEN + h.payload_len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        for v in [h.in_dim, h.out_dim, h.rank, h.hidden, h.layer] {
            let v = u32::try_from(v).map_err(|_| Error::SizeMismatch(format!("{v} does not fit in u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.scale.to_le_bytes());
        out.extend_from_slice(&h.tau.to_le_bytes());
        let parts: [&[f64]; 5] = [
            self.encoder.base(),
            self.encoder.bias(),
            self.encoder.lora_params(),
            self.detection.params(),
            self.quality.params(),
        ];
        for (i, v) in parts.iter().flat_map(|p| p.iter()).enumerate() {
            let f = *v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("parameter {i} is {v}")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = parse_checkpoint_header(bytes)?;
        if h.rank == 0 || h.in_dim == 0 || h.out_dim == 0 || h.hidden == 0 {
            return Err(Error::SizeMismatch("checkpoint header has a zero dimension".into()));
        }
        if !h.scale.is_finite() || !h.tau.is_finite() {
            return Err(Error::NonFinite("checkpoint header scale or tau".into()));
        }
        let mut cur = Cursor::new(bytes, 4 + CHECKPOINT_HEADER_LEN);
        let payload_len = h.payload_len();
        let remaining = cur.remaining();
        if remaining < payload_len {
            return Err(Error::Truncated(format!(
                "header declares {payload_len} payload bytes, file holds {remaining}"
            )));
        }
        if remaining > payload_len {
            return Err(Error::SizeMismatch(format!(
                "{} trailing bytes after payload",
                remaining - payload_len
            )));
        }
        let mut read = |name: &str, n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|i| {
                    let v = cur.f32().expect("length checked");
                    if v.is_finite() {
                        Ok(f64::from(v))
                    } else {
                        Err(Error::NonFinite(format!("{name}[{i}] is {v}")))
                    }
                })
                .collect()
        };
        let [base, bias, a, b, det, qual] = h.sections();
        let base = read(base.0, base.1)?;
        let bias = read(bias.0, bias.1)?;
        let mut lora = read(a.0, a.1)?;
        lora.extend(read(b.0, b.1)?);
        let det = read(det.0, det.1)?;
        let qual = read(qual.0, qual.1)?;
        Ok(Self {
            layer: h.layer,
            tau: f64::from(h.tau),
            encoder: LoraLinear::from_parts(h.in_dim, h.out_dim, h.rank, f64::from(h.scale), base, bias, lora)?,
            detection: DetectionHead::from_params(h.out_dim, h.hidden, det)?,
            quality: QualityHead::from_params(h.out_dim, h.hidden, qual)?,
        })
    }

    /// Rounds every parameter to its persisted precision.
    pub fn quantized(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes()?)
    }
}

pub fn parse_checkpoint_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found,
        });
    }
    let mut cur = Cursor::new(bytes, 4);
    let short = || Error::Truncated(format!("header shorter than {CHECKPOINT_HEADER_LEN} bytes"));
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = cur.u32().ok_or_else(short)? as usize;
    }
    let scale = cur.f32().ok_or_else(short)?;
    let tau = cur.f32().ok_or_else(short)?;
    let [in_dim, out_dim, rank, hidden, layer] = dims;
    Ok(CheckpointHeader {
        in_dim,
        out_dim,
        rank,
        hidden,
        layer,
        scale,
        tau,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
