//! Per-parameter saliency at initialization.
//!
//! Each client scores every connection as the magnitude of weight times
//! gradient, averaged over a handful of its own minibatches. Scores for
//! non-maskable parameters (biases) are pinned to zero; the masking module
//! excludes them from ranking.

use crate::error::{Error, Result};
use crate::nn::{self, Architecture, Batch, ParamVector};

pub const SCORES_MAGIC: [u8; 4] = *b"SGSC";

/// Nonnegative per-parameter score vector, aligned with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyScores {
    scores: Vec<f32>,
    batches_used: u32,
}

impl SaliencyScores {
    pub fn new(scores: Vec<f32>, batches_used: u32) -> Result<Self> {
        if batches_used == 0 {
            return Err(Error::EmptyBatches);
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::NonFinite("saliency scores"));
        }
        Ok(SaliencyScores {
            scores,
            batches_used,
        })
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn batches_used(&self) -> u32 {
        self.batches_used
    }

    /// Wire size of the serialized scores: magic + dims + batch count + data.
    pub const fn payload_bytes(d: usize) -> usize {
        12 + 4 * d
    }

    /// `SGSC` format: magic, u32 length, u32 batches_used, then the scores
    /// as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::payload_bytes(self.scores.len()));
        out.extend_from_slice(&SCORES_MAGIC);
        out.extend_from_slice(&(self.scores.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.batches_used.to_le_bytes());
        for s in &self.scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::codec("SGSC", "truncated header"));
        }
        if bytes[0..4] != SCORES_MAGIC {
            return Err(Error::codec("SGSC", "bad magic"));
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let batches_used = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if bytes.len() != Self::payload_bytes(d) {
            return Err(Error::codec(
                "SGSC",
                format!("expected {} bytes, got {}", Self::payload_bytes(d), bytes.len()),
            ));
        }
        let scores = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        SaliencyScores::new(scores, batches_used)
    }
}

/// Scores every parameter as `mean_b |θ_j · g_j(b)|` over the given batches,
/// with gradients from exact backprop at the supplied (initialization)
/// parameters. Non-maskable positions receive zero.
pub fn compute_saliency(
    params: &ParamVector,
    arch: &Architecture,
    batches: &[Batch],
) -> Result<SaliencyScores> {
    if batches.is_empty() {
        return Err(Error::EmptyBatches);
    }
    let d = params.len();
    let mut acc = vec![0.0f64; d];
    for batch in batches {
        let grad = nn::backward(params, arch, batch)?;
        for (a, (&theta, &g)) in acc.iter_mut().zip(params.values().iter().zip(grad.values())) {
            *a += (theta as f64 * g as f64).abs();
        }
    }
    let n = batches.len() as f64;
    let flags = params.manifest().maskable_flags();
    let scores = acc
        .iter()
        .zip(flags)
        .map(|(&a, maskable)| if maskable { (a / n) as f32 } else { 0.0 })
        .collect();
    SaliencyScores::new(scores, batches.len() as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(arch: &Architecture, seed: u64, rows: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..rows * arch.input_dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let labels = (0..rows)
            .map(|_| rng.random_range(0..arch.classes as u32))
            .collect();
        Batch::new(inputs, labels, arch.input_dim).unwrap()
    }

    #[test]
    fn single_batch_matches_weight_times_grad() {
        let arch = Architecture::mlp(&[3, 4, 2]).unwrap();
        let params = init_model(&arch, 3).unwrap();
        let batch = random_batch(&arch, 5, 4);
        let scores = compute_saliency(&params, &arch, std::slice::from_ref(&batch)).unwrap();
        let grad = nn::backward(&params, &arch, &batch).unwrap();
        let flags = params.manifest().maskable_flags();
        for j in 0..params.len() {
            let expected = if flags[j] {
                (params.values()[j] as f64 * grad.values()[j] as f64).abs() as f32
            } else {
                0.0
            };
            assert_eq!(scores.scores()[j], expected, "coord {j}");
        }
    }

    #[test]
    fn two_batches_average_coordinatewise() {
        let arch = Architecture::mlp(&[3, 4, 2]).unwrap();
        let params = init_model(&arch, 3).unwrap();
        let b1 = random_batch(&arch, 5, 4);
        let b2 = random_batch(&arch, 6, 4);
        let scores = compute_saliency(&params, &arch, &[b1.clone(), b2.clone()]).unwrap();
        let g1 = nn::backward(&params, &arch, &b1).unwrap();
        let g2 = nn::backward(&params, &arch, &b2).unwrap();
        let flags = params.manifest().maskable_flags();
        for j in 0..params.len() {
            let expected = if flags[j] {
                let t = params.values()[j] as f64;
                ((((t * g1.values()[j] as f64).abs()) + ((t * g2.values()[j] as f64).abs())) / 2.0)
                    as f32
            } else {
                0.0
            };
            assert_eq!(scores.scores()[j], expected, "coord {j}");
        }
        assert_eq!(scores.batches_used(), 2);
    }

    #[test]
    fn zero_weight_means_zero_score() {
        let arch = Architecture::mlp(&[3, 4, 2]).unwrap();
        let mut params = init_model(&arch, 9).unwrap();
        params.values_mut()[0] = 0.0;
        params.values_mut()[5] = 0.0;
        let batch = random_batch(&arch, 2, 4);
        let scores = compute_saliency(&params, &arch, &[batch]).unwrap();
        assert_eq!(scores.scores()[0], 0.0);
        assert_eq!(scores.scores()[5], 0.0);
    }

    #[test]
    fn scaled_gradients_scale_scores_and_preserve_ranking() {
        // s(c·g) = c·s(g): the score formula is linear in the gradient, so a
        // positive rescaling of the loss cannot change the ranking.
        let arch = Architecture::mlp(&[3, 5, 2]).unwrap();
        let params = init_model(&arch, 9).unwrap();
        let batch = random_batch(&arch, 2, 4);
        let grad = nn::backward(&params, &arch, &batch).unwrap();
        let c = 3.5f64;
        let base: Vec<f64> = params
            .values()
            .iter()
            .zip(grad.values())
            .map(|(&t, &g)| (t as f64 * g as f64).abs())
            .collect();
        let scaled: Vec<f64> = params
            .values()
            .iter()
            .zip(grad.values())
            .map(|(&t, &g)| (t as f64 * (c * g as f64)).abs())
            .collect();
        let mut order_base: Vec<usize> = (0..base.len()).collect();
        let mut order_scaled = order_base.clone();
        order_base.sort_by(|&a, &b| base[b].total_cmp(&base[a]).then(a.cmp(&b)));
        order_scaled.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        assert_eq!(order_base, order_scaled);
        for (s, b) in scaled.iter().zip(&base) {
            assert!((s - c * b).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_empty_batch_list() {
        let arch = Architecture::mlp(&[3, 2]).unwrap();
        let params = init_model(&arch, 1).unwrap();
        assert!(matches!(
            compute_saliency(&params, &arch, &[]),
            Err(Error::EmptyBatches)
        ));
    }

    #[test]
    fn scores_serialize_roundtrip_and_validate() {
        let scores = SaliencyScores::new(vec![0.0, 1.5, 0.25], 4).unwrap();
        let bytes = scores.to_bytes();
        assert_eq!(bytes.len(), SaliencyScores::payload_bytes(3));
        assert_eq!(bytes.len(), 12 + 4 * 3);
        let back = SaliencyScores::from_bytes(&bytes).unwrap();
        assert_eq!(back, scores);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SaliencyScores::from_bytes(&bad).is_err());
        assert!(SaliencyScores::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
