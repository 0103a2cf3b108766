//! Wire encoding for gradients.
//!
//! Masked gradients travel as index/value pairs in a fixed layout: one entry
//! per active mask index, explicit zeros included, so every round of a
//! session ships byte-identical message sizes. Because the active set never
//! changes, a values-only form can drop the index column after the first
//! exchange. Dense vectors (initial parameters, FedAvg gradients) use a flat
//! f32 image. Everything is little-endian with 32-bit values on the wire.

use crate::error::{Error, Result};
use crate::masking::GlobalMask;
use crate::nn::GradVector;

pub const SPARSE_MAGIC: [u8; 4] = *b"SGGR";
pub const VALUES_ONLY_MAGIC: [u8; 4] = *b"SGGV";
pub const DENSE_MAGIC: [u8; 4] = *b"SGDN";

/// Index/value encoding of a masked gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrad {
    indices: Vec<u32>,
    values: Vec<f32>,
    dense_len: u32,
}

impl SparseGrad {
    /// Strictly increasing indices paired with values.
    pub fn new(indices: Vec<u32>, values: Vec<f32>, dense_len: u32) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: indices.len(),
                got: values.len(),
            });
        }
        let mut prev: Option<u32> = None;
        for &idx in &indices {
            if idx >= dense_len {
                return Err(Error::codec("SGGR", format!("index {idx} out of range {dense_len}")));
            }
            if prev.is_some_and(|p| p >= idx) {
                return Err(Error::codec("SGGR", "indices not strictly increasing"));
            }
            prev = Some(idx);
        }
        Ok(SparseGrad {
            indices,
            values,
            dense_len,
        })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn dense_len(&self) -> usize {
        self.dense_len as usize
    }

    /// Exact serialized size of the index+value form.
    pub fn payload_bytes(&self) -> usize {
        12 + 8 * self.nnz()
    }

    /// Exact serialized size of the values-only form.
    pub fn values_only_payload_bytes(&self) -> usize {
        12 + 4 * self.nnz()
    }

    /// `SGGR` format: magic, u32 dense length, u32 nnz, then nnz pairs of
    /// (u32 index, f32 value).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        out.extend_from_slice(&SPARSE_MAGIC);
        out.extend_from_slice(&self.dense_len.to_le_bytes());
        out.extend_from_slice(&(self.nnz() as u32).to_le_bytes());
        for (idx, v) in self.indices.iter().zip(&self.values) {
            out.extend_from_slice(&idx.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (d, nnz) = parse_header(bytes, SPARSE_MAGIC, "SGGR")?;
        if bytes.len() != 12 + 8 * nnz {
            return Err(Error::codec("SGGR", "truncated payload"));
        }
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for pair in bytes[12..].chunks_exact(8) {
            indices.push(u32::from_le_bytes(pair[0..4].try_into().unwrap()));
            let v = f32::from_le_bytes(pair[4..8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::codec("SGGR", "non-finite value"));
            }
            values.push(v);
        }
        SparseGrad::new(indices, values, d as u32)
    }

    /// `SGGV` format: magic, u32 dense length, u32 nnz, then nnz f32 values.
    /// The index column is implied by the session mask.
    pub fn to_values_only_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values_only_payload_bytes());
        out.extend_from_slice(&VALUES_ONLY_MAGIC);
        out.extend_from_slice(&self.dense_len.to_le_bytes());
        out.extend_from_slice(&(self.nnz() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_values_only_bytes(bytes: &[u8], mask: &GlobalMask) -> Result<Self> {
        let (d, nnz) = parse_header(bytes, VALUES_ONLY_MAGIC, "SGGV")?;
        if bytes.len() != 12 + 4 * nnz {
            return Err(Error::codec("SGGV", "truncated payload"));
        }
        if d != mask.len() || nnz != mask.active_count() {
            return Err(Error::codec(
                "SGGV",
                format!(
                    "payload {d}x{nnz} does not match mask {}x{}",
                    mask.len(),
                    mask.active_count()
                ),
            ));
        }
        let mut values = Vec::with_capacity(nnz);
        for c in bytes[12..].chunks_exact(4) {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::codec("SGGV", "non-finite value"));
            }
            values.push(v);
        }
        SparseGrad::new(mask.active_indices().to_vec(), values, d as u32)
    }
}

fn parse_header(bytes: &[u8], magic: [u8; 4], format: &'static str) -> Result<(usize, usize)> {
    if bytes.len() < 12 {
        return Err(Error::codec(format, "truncated header"));
    }
    if bytes[0..4] != magic {
        return Err(Error::codec(format, "bad magic"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let nnz = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((d, nnz))
}

/// Encodes a gradient against a mask: one entry per active index in
/// ascending order, zeros at active positions kept explicitly.
pub fn encode(grad: &GradVector, mask: &GlobalMask) -> Result<SparseGrad> {
    if grad.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: mask.len(),
            got: grad.len(),
        });
    }
    let values = mask
        .active_indices()
        .iter()
        .map(|&i| grad.values()[i as usize])
        .collect();
    SparseGrad::new(mask.active_indices().to_vec(), values, grad.len() as u32)
}

/// Expands a sparse gradient back to a dense vector, zeros elsewhere.
/// `decode(encode(g, m))` equals `mask_grad(g, m)` exactly.
pub fn decode(sg: &SparseGrad) -> GradVector {
    let mut values = vec![0.0f32; sg.dense_len()];
    for (&idx, &v) in sg.indices().iter().zip(sg.values()) {
        values[idx as usize] = v;
    }
    GradVector::from_values(values)
}

/// Serialized size of a dense f32 vector: magic + u32 length header + data.
pub const fn dense_payload_bytes(d: usize) -> usize {
    8 + 4 * d
}

/// `SGDN` format: magic, u32 length, then the values as little-endian f32.
pub fn encode_dense(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(dense_payload_bytes(values.len()));
    out.extend_from_slice(&DENSE_MAGIC);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dense(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 8 {
        return Err(Error::codec("SGDN", "truncated header"));
    }
    if bytes[0..4] != DENSE_MAGIC {
        return Err(Error::codec("SGDN", "bad magic"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != dense_payload_bytes(d) {
        return Err(Error::codec("SGDN", "truncated payload"));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<f32>>();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::codec("SGDN", "non-finite value"));
    }
    Ok(values)
}
