//! The `LFS1` feature-stack container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LFS1"
//! 4       4     n_samples  (u32)
//! 8       4     n_layers   (u32)
//! 12      4     dim        (u32)
//! 16      4     id_table_len, bytes (u32)
//! 20      ..    id table: n_samples × (u32 byte length + UTF-8 bytes)
//! ..      ..    payload: n_samples × n_layers × dim f32, (sample, layer, feature) order
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const STACK_MAGIC: [u8; 4] = *b"LFS1";
/// Bytes of fixed header following the magic.
pub const STACK_HEADER_LEN: usize = 16;

/// Per-sample, per-layer feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    n_samples: usize,
    n_layers: usize,
    dim: usize,
    data: Vec<f32>,
    sample_ids: Vec<String>,
}

impl FeatureStack {
    /// Validates every invariant: data length, finiteness and id uniqueness.
    pub fn new(
        n_layers: usize,
        dim: usize,
        data: Vec<f32>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let n_samples = sample_ids.len();
        let expected = n_samples * n_layers * dim;
        if data.len() != expected {
            return Err(Error::SizeMismatch(format!(
                "data has {} values, expected {n_samples}×{n_layers}×{dim} = {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value {} at flat index {i}", data[i])));
        }
        let mut seen = HashSet::with_capacity(n_samples);
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id {id:?}")));
            }
        }
        Ok(Self {
            n_samples,
            n_layers,
            dim,
            data,
            sample_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn index_of(&self, sample_id: &str) -> Option<usize> {
        self.sample_ids.iter().position(|s| s == sample_id)
    }

    /// Feature vector of one sample at one layer.
    pub fn vector(&self, sample: usize, layer: usize) -> &[f32] {
        let start = (sample * self.n_layers + layer) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// All samples at `layer` as an `n_samples × dim` matrix.
    pub fn layer_matrix(&self, layer: usize) -> Matrix {
        self.layer_matrix_rows(layer, &(0..self.n_samples).collect::<Vec<_>>())
    }

    /// Selected samples at `layer`, rows in the order given.
    pub fn layer_matrix_rows(&self, layer: usize, rows: &[usize]) -> Matrix {
        assert!(layer < self.n_layers, "layer {layer} out of range");
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &i in rows {
            data.extend(self.vector(i, layer).iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(rows.len(), self.dim, data)
    }

    /// A new stack holding only the given samples, in the order given.
    pub fn select(&self, rows: &[usize]) -> FeatureStack {
        let per = self.n_layers * self.dim;
        let mut data = Vec::with_capacity(rows.len() * per);
        let mut ids = Vec::with_capacity(rows.len());
        for &i in rows {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
            ids.push(self.sample_ids[i].clone());
        }
        FeatureStack {
            n_samples: rows.len(),
            n_layers: self.n_layers,
            dim: self.dim,
            data,
            sample_ids: ids,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("value {} at flat index {i}", self.data[i])));
        }
        let mut ids = Vec::new();
        for id in &self.sample_ids {
            ids.extend_from_slice(&u32_len(id.len())?.to_le_bytes());
            ids.extend_from_slice(id.as_bytes());
        }
        let mut out =
            Vec::with_capacity(4 + STACK_HEADER_LEN + ids.len() + self.data.len() * 4);
        out.extend_from_slice(&STACK_MAGIC);
        for v in [self.n_samples, self.n_layers, self.dim, ids.len()] {
            out.extend_from_slice(&u32_len(v)?.to_le_bytes());
        }
        out.extend_from_slice(&ids);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_stack_header(bytes)?;
        let mut cur = Cursor::new(bytes, 4 + STACK_HEADER_LEN);
        let id_table = cur
            .take(header.id_table_len)
            .ok_or_else(|| Error::Truncated("id table shorter than declared".into()))?;
        let sample_ids = parse_id_table(id_table, header.n_samples)?;

        let n_values = header
            .n_samples
            .checked_mul(header.n_layers)
            .and_then(|v| v.checked_mul(header.dim))
            .ok_or_else(|| Error::SizeMismatch("header dimensions overflow".into()))?;
        let payload_len = n_values * 4;
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
        let payload = cur.take(payload_len).expect("length checked");
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureStack::new(header.n_layers, header.dim, data, sample_ids)
    }
}

/// Fixed header fields of an `LFS1` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackHeader {
    pub n_samples: usize,
    pub n_layers: usize,
    pub dim: usize,
    pub id_table_len: usize,
}

pub fn parse_stack_header(bytes: &[u8]) -> Result<StackHeader> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != STACK_MAGIC {
        return Err(Error::BadMagic {
            expected: STACK_MAGIC,
            found,
        });
    }
    let mut cur = Cursor::new(bytes, 4);
    let mut next = || {
        cur.u32()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Truncated("header shorter than 16 bytes".into()))
    };
    Ok(StackHeader {
        n_samples: next()?,
        n_layers: next()?,
        dim: next()?,
        id_table_len: next()?,
    })
}

fn parse_id_table(table: &[u8], n_samples: usize) -> Result<Vec<String>> {
    let mut cur = Cursor::new(table, 0);
    let mut ids = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let len = cur
            .u32()
            .ok_or_else(|| Error::SizeMismatch(format!("id table ends before entry {i}")))?
            as usize;
        let raw = cur
            .take(len)
            .ok_or_else(|| Error::SizeMismatch(format!("id {i} overruns the id table")))?;
        let id = std::str::from_utf8(raw)
            .map_err(|e| Error::invalid(format!("id {i} is not UTF-8: {e}")))?;
        ids.push(id.to_owned());
    }
    if cur.remaining() != 0 {
        return Err(Error::SizeMismatch(format!(
            "id table has {} unused bytes",
            cur.remaining()
        )));
    }
    Ok(ids)
}

pub fn write_feature_stack(stack: &FeatureStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = stack.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_stack(path: impl AsRef<Path>) -> Result<FeatureStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureStack::from_bytes(&bytes)
}

fn u32_len(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::SizeMismatch(format!("{v} does not fit in u32")))
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len().saturating_sub(self.pos)
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureStack {
        FeatureStack::new(1, 2, vec![0.5, -1.0], vec!["a".into()]).unwrap()
    }

    #[test]
    fn tiny_stack_layout() {
        let bytes = tiny().to_bytes().unwrap();
        // magic + 16-byte header + id table (4 + 1) + 8 payload bytes
        assert_eq!(bytes.len(), 4 + 16 + 5 + 8);
        assert_eq!(&bytes[..4], b"LFS1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &5u32.to_le_bytes());
        assert_eq!(&bytes[bytes.len() - 8..bytes.len() - 4], &0.5f32.to_le_bytes());
        assert_eq!(FeatureStack::from_bytes(&bytes).unwrap(), tiny());
    }

    #[test]
    fn payload_size_is_product_of_dims() {
        let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let s = FeatureStack::new(4, 8, vec![1.0; 96], ids).unwrap();
        let bytes = s.to_bytes().unwrap();
        let h = parse_stack_header(&bytes).unwrap();
        assert_eq!(bytes.len() - 4 - STACK_HEADER_LEN - h.id_table_len, 384);
    }

    #[test]
    fn nan_is_refused() {
        let err = FeatureStack::new(1, 2, vec![f32::NAN, 0.0], vec!["a".into()]).unwrap_err();
        assert!(err.to_string().contains("non-finite payload"));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = FeatureStack::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn header_claiming_more_samples_is_truncated() {
        let one = FeatureStack::new(1, 2, vec![1.0, 2.0], vec!["a".into()]).unwrap();
        let mut bytes = one.to_bytes().unwrap();
        // Claim two samples and make the id table hold two ids, keep one sample of payload.
        let payload = bytes.split_off(bytes.len() - 8);
        bytes.truncate(4 + STACK_HEADER_LEN);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let table: Vec<u8> = [1u32.to_le_bytes().as_slice(), b"a", &1u32.to_le_bytes(), b"b"].concat();
        bytes[16..20].copy_from_slice(&(table.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&table);
        bytes.extend_from_slice(&payload);
        let err = FeatureStack::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn trailing_bytes_are_a_size_mismatch() {
        let mut bytes = tiny().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            FeatureStack::from_bytes(&bytes).unwrap_err(),
            Error::SizeMismatch(_)
        ));
    }

    #[test]
    fn nan_in_file_rejected_on_read() {
        let mut bytes = tiny().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            FeatureStack::from_bytes(&bytes).unwrap_err(),
            Error::NonFinite(_)
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(FeatureStack::new(1, 1, vec![0.0, 1.0], vec!["a".into(), "a".into()]).is_err());
    }
}
