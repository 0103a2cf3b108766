//! Global top-k mask construction and application.
//!
//! Client scores are summed into one global score vector, the k best
//! maskable connections are kept, and the resulting binary mask is applied
//! to gradients for the rest of the session. Non-maskable parameters
//! (biases) are always active and never counted against the sparsity budget.

use crate::error::{Error, Result};
use crate::nn::{GradVector, Manifest};
use crate::saliency::SaliencyScores;

pub const MASK_MAGIC: [u8; 4] = *b"SGMK";

/// Binary connectivity mask with a fixed active-index set.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMask {
    bits: Vec<bool>,
    active_indices: Vec<u32>,
    density: f64,
}

impl GlobalMask {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Sorted indices of all active parameters, biases included.
    pub fn active_indices(&self) -> &[u32] {
        &self.active_indices
    }

    pub fn active_count(&self) -> usize {
        self.active_indices.len()
    }

    /// Retained fraction of the maskable set.
    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    /// Mask keeping every parameter (sparsity zero).
    pub fn all_ones(manifest: &Manifest) -> Self {
        let d = manifest.total_params();
        GlobalMask {
            bits: vec![true; d],
            active_indices: (0..d as u32).collect(),
            density: 1.0,
        }
    }

    pub fn payload_bytes(&self) -> usize {
        12 + 4 * self.active_indices.len()
    }

    /// `SGMK` format: magic, u32 dense length, u32 active count, then the
    /// active indices as little-endian u32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        out.extend_from_slice(&MASK_MAGIC);
        out.extend_from_slice(&(self.bits.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.active_indices.len() as u32).to_le_bytes());
        for idx in &self.active_indices {
            out.extend_from_slice(&idx.to_le_bytes());
        }
        out
    }

    /// Parses and validates a mask against the receiver's manifest.
    pub fn from_bytes(bytes: &[u8], manifest: &Manifest) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::codec("SGMK", "truncated header"));
        }
        if bytes[0..4] != MASK_MAGIC {
            return Err(Error::codec("SGMK", "bad magic"));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if d != manifest.total_params() {
            return Err(Error::codec(
                "SGMK",
                format!("mask over {} params, model has {}", d, manifest.total_params()),
            ));
        }
        if bytes.len() != 12 + 4 * count {
            return Err(Error::codec("SGMK", "truncated index list"));
        }
        let mut active_indices = Vec::with_capacity(count);
        let mut bits = vec![false; d];
        let mut prev: Option<u32> = None;
        for c in bytes[12..].chunks_exact(4) {
            let idx = u32::from_le_bytes(c.try_into().unwrap());
            if idx as usize >= d {
                return Err(Error::codec("SGMK", format!("index {idx} out of range {d}")));
            }
            if prev.is_some_and(|p| p >= idx) {
                return Err(Error::codec("SGMK", "indices not strictly increasing"));
            }
            prev = Some(idx);
            bits[idx as usize] = true;
            active_indices.push(idx);
        }
        let flags = manifest.maskable_flags();
        if flags.iter().zip(&bits).any(|(&m, &b)| !m && !b) {
            return Err(Error::codec("SGMK", "non-maskable index pruned"));
        }
        let maskable_active = active_indices
            .iter()
            .filter(|&&i| flags[i as usize])
            .count();
        if manifest.maskable_count() > 0 && maskable_active == 0 {
            return Err(Error::DegenerateMask);
        }
        let density = if manifest.maskable_count() == 0 {
            1.0
        } else {
            maskable_active as f64 / manifest.maskable_count() as f64
        };
        Ok(GlobalMask {
            bits,
            active_indices,
            density,
        })
    }
}

/// Elementwise sum of per-client scores, in the order given (callers pass
/// ascending client id).
pub fn aggregate_scores(all_scores: &[SaliencyScores]) -> Result<SaliencyScores> {
    let first = all_scores.first().ok_or(Error::EmptyBatches)?;
    let d = first.len();
    let mut acc = vec![0.0f64; d];
    let mut batches = 0u32;
    for s in all_scores {
        if s.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                got: s.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(s.scores()) {
            *a += v as f64;
        }
        batches = batches.saturating_add(s.batches_used());
    }
    SaliencyScores::new(acc.iter().map(|&a| a as f32).collect(), batches)
}

/// Keeps the `k = round((1 − sparsity) · |maskable|)` highest-scoring
/// maskable connections, ties broken toward lower indices; non-maskable
/// parameters are always kept.
pub fn topk_mask(scores: &SaliencyScores, manifest: &Manifest, sparsity: f64) -> Result<GlobalMask> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::SparsityOutOfRange(sparsity));
    }
    let d = manifest.total_params();
    if scores.len() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            got: scores.len(),
        });
    }
    let flags = manifest.maskable_flags();
    let mut ranked: Vec<u32> = (0..d as u32).filter(|&i| flags[i as usize]).collect();
    let m = ranked.len();
    let k = ((1.0 - sparsity) * m as f64).round() as usize;
    if m > 0 && k == 0 {
        return Err(Error::DegenerateMask);
    }
    ranked.sort_unstable_by(|&a, &b| {
        scores.scores()[b as usize]
            .total_cmp(&scores.scores()[a as usize])
            .then(a.cmp(&b))
    });
    let mut bits: Vec<bool> = flags.iter().map(|&maskable| !maskable).collect();
    for &idx in &ranked[..k] {
        bits[idx as usize] = true;
    }
    let active_indices = (0..d as u32).filter(|&i| bits[i as usize]).collect();
    Ok(GlobalMask {
        bits,
        active_indices,
        density: if m == 0 { 1.0 } else { k as f64 / m as f64 },
    })
}

/// Zeroes the gradient exactly where the mask is inactive.
pub fn mask_grad(grad: &GradVector, mask: &GlobalMask) -> Result<GradVector> {
    if grad.len() != mask.len() {
        return Err(Error::LengthMismatch {
            expected: mask.len(),
            got: grad.len(),
        });
    }
    let values = grad
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&g, &on)| if on { g } else { 0.0 })
        .collect();
    Ok(GradVector::from_values(values))
}
