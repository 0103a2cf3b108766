//! Property tests for the mask, codec, and model-state invariants.

use std::sync::Arc;

use proptest::collection::vec;
use proptest::prelude::*;

use salientgrads_core::codec::{decode, dense_payload_bytes, encode, SparseGrad};
use salientgrads_core::masking::{aggregate_scores, mask_grad, topk_mask, GlobalMask};
use salientgrads_core::nn::{apply_update, GradVector, Manifest, ParamVector, TensorInfo};
use salientgrads_core::saliency::SaliencyScores;

fn all_maskable(d: usize) -> Manifest {
    Manifest::new(vec![TensorInfo {
        name: "w.weight".into(),
        shape: vec![1, d],
        offset: 0,
        maskable: true,
    }])
    .unwrap()
}

/// Weights-then-bias manifest, biases never maskable.
fn weights_and_bias(weights: usize, biases: usize) -> Manifest {
    Manifest::new(vec![
        TensorInfo {
            name: "fc0.weight".into(),
            shape: vec![1, weights],
            offset: 0,
            maskable: true,
        },
        TensorInfo {
            name: "fc0.bias".into(),
            shape: vec![biases],
            offset: weights,
            maskable: false,
        },
    ])
    .unwrap()
}

fn scores(v: Vec<f32>) -> SaliencyScores {
    SaliencyScores::new(v, 1).unwrap()
}

proptest! {
    /// popcount over maskables is exactly round((1-s)·M) for every input.
    #[test]
    fn mask_cardinality_is_exact(
        raw in vec(0.0f32..100.0, 8..120),
        biases in 1usize..6,
        sparsity in 0.0f64..0.95,
    ) {
        let weights = raw.len();
        let manifest = weights_and_bias(weights, biases);
        let mut padded = raw.clone();
        padded.extend(std::iter::repeat_n(0.0, biases));
        let k = ((1.0 - sparsity) * weights as f64).round() as usize;
        prop_assume!(k > 0);
        let mask = topk_mask(&scores(padded), &manifest, sparsity).unwrap();
        let active_maskable = mask.active_indices().iter().filter(|&&i| (i as usize) < weights).count();
        prop_assert_eq!(active_maskable, k);
        // biases always active
        prop_assert!(mask.bits()[weights..].iter().all(|&b| b));
        prop_assert_eq!(mask.active_count(), k + biases);
    }

    /// topk_mask(c·s) == topk_mask(s) for c > 0.
    #[test]
    fn mask_is_scale_invariant(
        raw in vec(0.0f32..100.0, 6..80),
        scale in prop_oneof![Just(0.125f32), Just(0.5), Just(3.0), Just(64.0)],
        sparsity in 0.0f64..0.9,
    ) {
        let manifest = all_maskable(raw.len());
        let k = ((1.0 - sparsity) * raw.len() as f64).round() as usize;
        prop_assume!(k > 0);
        let base = topk_mask(&scores(raw.clone()), &manifest, sparsity).unwrap();
        let scaled = topk_mask(&scores(raw.iter().map(|v| v * scale).collect()), &manifest, sparsity).unwrap();
        prop_assert_eq!(base.bits(), scaled.bits());
    }

    /// Lowering sparsity only ever grows the active set.
    #[test]
    fn mask_active_sets_are_nested(
        raw in vec(0.0f32..100.0, 10..80),
        s_low in 0.05f64..0.5,
        s_high in 0.5f64..0.9,
    ) {
        let manifest = all_maskable(raw.len());
        prop_assume!(((1.0 - s_high) * raw.len() as f64).round() as usize > 0);
        let dense_mask = topk_mask(&scores(raw.clone()), &manifest, s_low).unwrap();
        let sparse_mask = topk_mask(&scores(raw), &manifest, s_high).unwrap();
        for &idx in sparse_mask.active_indices() {
            prop_assert!(dense_mask.is_active(idx as usize));
        }
    }

    /// mask_grad is idempotent and decode∘encode reproduces it bitwise.
    #[test]
    fn codec_roundtrip_matches_mask_grad(
        values in vec(-1e6f32..1e6, 4..100),
        sparsity in 0.0f64..0.9,
    ) {
        let d = values.len();
        let manifest = all_maskable(d);
        prop_assume!(((1.0 - sparsity) * d as f64).round() as usize > 0);
        let rank_scores: Vec<f32> = (0..d).map(|i| ((i * 7919) % 101) as f32).collect();
        let mask = topk_mask(&scores(rank_scores), &manifest, sparsity).unwrap();
        let grad = GradVector::from_values(values);
        let masked = mask_grad(&grad, &mask).unwrap();
        let twice = mask_grad(&masked, &mask).unwrap();
        prop_assert_eq!(twice.values(), masked.values());

        let sg = encode(&grad, &mask).unwrap();
        prop_assert_eq!(sg.nnz(), mask.active_count());
        let bytes = sg.to_bytes();
        prop_assert_eq!(bytes.len(), sg.payload_bytes());
        let decoded = decode(&SparseGrad::from_bytes(&bytes).unwrap());
        prop_assert_eq!(decoded.values(), masked.values());

        let vo = sg.to_values_only_bytes();
        prop_assert_eq!(vo.len(), sg.values_only_payload_bytes());
        let from_vo = SparseGrad::from_values_only_bytes(&vo, &mask).unwrap();
        let vo_decoded = decode(&from_vo);
        prop_assert_eq!(vo_decoded.values(), masked.values());
    }

    /// Aggregation is equivalent to coordinatewise f64 summation.
    #[test]
    fn aggregate_matches_reference_sum(
        rows in vec(vec(0.0f32..10.0, 12), 1..6),
    ) {
        let inputs: Vec<SaliencyScores> = rows.iter().cloned().map(scores).collect();
        let agg = aggregate_scores(&inputs).unwrap();
        for j in 0..12 {
            let expected = rows.iter().map(|r| r[j] as f64).sum::<f64>() as f32;
            prop_assert_eq!(agg.scores()[j], expected);
        }
    }

    /// Dense payload formula and the sparse/dense limit ratio.
    #[test]
    fn payload_ratio_approaches_twice_density(d in 1000usize..50_000) {
        let density = 0.1f64;
        let nnz = (density * d as f64).round() as usize;
        let sparse = 12 + 8 * nnz;
        let dense = dense_payload_bytes(d);
        let ratio = sparse as f64 / dense as f64;
        prop_assert!((ratio - 2.0 * density).abs() < 0.01, "ratio {ratio}");
    }

    /// Flattened parameters reassemble exactly from manifest views.
    #[test]
    fn flatten_unflatten_roundtrip(weights in 1usize..40, biases in 1usize..8) {
        let manifest = Arc::new(weights_and_bias(weights, biases));
        let values: Vec<f32> = (0..weights + biases).map(|i| i as f32 * 0.25 - 3.0).collect();
        let params = ParamVector::new(values.clone(), Arc::clone(&manifest)).unwrap();
        let mut rebuilt = vec![0.0f32; values.len()];
        for t in manifest.tensors() {
            rebuilt[t.offset..t.offset + t.len()]
                .copy_from_slice(params.tensor(&t.name).unwrap());
        }
        prop_assert_eq!(rebuilt, values);
    }

    /// θ − lr·0 is exactly θ for every stored value.
    #[test]
    fn zero_gradient_never_moves_params(values in vec(-1e3f32..1e3, 1..50), lr in 0.001f64..10.0) {
        let manifest = Arc::new(all_maskable(values.len()));
        let params = ParamVector::new(values, manifest).unwrap();
        let updated = apply_update(&params, &GradVector::zeros(params.len()), lr).unwrap();
        prop_assert_eq!(updated.values(), params.values());
    }

    /// Every mask survives its wire format.
    #[test]
    fn mask_wire_roundtrip(raw in vec(0.0f32..50.0, 5..60), sparsity in 0.0f64..0.8) {
        let manifest = all_maskable(raw.len());
        prop_assume!(((1.0 - sparsity) * raw.len() as f64).round() as usize > 0);
        let mask = topk_mask(&scores(raw), &manifest, sparsity).unwrap();
        let back = GlobalMask::from_bytes(&mask.to_bytes(), &manifest).unwrap();
        prop_assert_eq!(back, mask);
    }
}
