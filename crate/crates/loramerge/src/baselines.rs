//! Reference merge strategies: weighted averaging of adapter deltas and
//! naive summation. Both operate on effective (alpha-scaled) deltas so
//! adapters of different ranks combine correctly.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::adapter::{validate_compatibility, LoraAdapter};
use crate::error::{MergeError, Result};
use crate::merge::LayerDelta;

fn combine(adapters: &[LoraAdapter], weights: &[f64]) -> Result<BTreeMap<String, LayerDelta>> {
    let plan = validate_compatibility(adapters, None)?;
    let mut out = BTreeMap::new();
    for planned in &plan.layers {
        let mut acc: DMatrix<f64> = DMatrix::zeros(planned.d_out, planned.d_in);
        for (adapter, &w) in adapters.iter().zip(weights) {
            let delta = adapter
                .effective_delta(&planned.layer_id)
                .expect("planned layers exist in every adapter");
            acc.axpy(w, &delta, 1.0);
        }
        out.insert(
            planned.layer_id.clone(),
            LayerDelta::new(planned.layer_id.clone(), acc),
        );
    }
    Ok(out)
}

/// Convex combination of the adapters' effective deltas. Weights default to
/// uniform 1/N and must sum to 1 within 1e-9.
pub fn weighted_average_merge(
    adapters: &[LoraAdapter],
    weights: Option<&[f64]>,
) -> Result<BTreeMap<String, LayerDelta>> {
    if adapters.is_empty() {
        return Err(MergeError::InvalidConfig(
            "at least one adapter is required".to_string(),
        ));
    }
    let weights: Vec<f64> = match weights {
        None => vec![1.0 / adapters.len() as f64; adapters.len()],
        Some(w) => {
            if w.len() != adapters.len() {
                return Err(MergeError::BadWeights(format!(
                    "{} weights for {} adapters",
                    w.len(),
                    adapters.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(MergeError::BadWeights(
                    "weights must be finite".to_string(),
                ));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MergeError::BadWeights(format!(
                    "weights sum to {sum}, expected 1"
                )));
            }
            w.to_vec()
        }
    };
    combine(adapters, &weights)
}

/// Plain sum of the adapters' effective deltas.
pub fn sum_merge(adapters: &[LoraAdapter]) -> Result<BTreeMap<String, LayerDelta>> {
    if adapters.is_empty() {
        return Err(MergeError::InvalidConfig(
            "at least one adapter is required".to_string(),
        ));
    }
    combine(adapters, &vec![1.0; adapters.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LoraLayer;
    use crate::container::Dtype;
    use crate::rng::{gaussian_matrix, keyed_rng};

    fn adapter_with(concept: &str, key: u64) -> LoraAdapter {
        let mut rng = keyed_rng(key, "baseline-test", &[concept]);
        let mut adapter = LoraAdapter::new(concept);
        adapter.insert(
            LoraLayer::new(
                "l",
                gaussian_matrix(&mut rng, 4, 2),
                gaussian_matrix(&mut rng, 2, 6),
                2.0,
                Dtype::F32,
            )
            .unwrap(),
        );
        adapter
    }

    #[test]
    fn uniform_average_of_two() {
        let a = adapter_with("a", 1);
        let b = adapter_with("b", 2);
        let expected =
            (a.effective_delta("l").unwrap() + b.effective_delta("l").unwrap()) * 0.5;
        let merged = weighted_average_merge(&[a, b], None).unwrap();
        assert!((&merged["l"].matrix - expected).norm() < 1e-12);
    }

    #[test]
    fn single_adapter_average_is_identity() {
        let a = adapter_with("a", 3);
        let expected = a.effective_delta("l").unwrap();
        let merged = weighted_average_merge(&[a], None).unwrap();
        assert_eq!(merged["l"].matrix, expected);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let a = adapter_with("a", 4);
        let b = adapter_with("b", 5);
        let err = weighted_average_merge(&[a, b], Some(&[0.3, 0.3])).unwrap_err();
        assert!(matches!(err, MergeError::BadWeights(_)));
    }

    #[test]
    fn weight_count_must_match() {
        let a = adapter_with("a", 6);
        let err = weighted_average_merge(&[a], Some(&[0.5, 0.5])).unwrap_err();
        assert!(matches!(err, MergeError::BadWeights(_)));
    }

    #[test]
    fn explicit_weights_are_applied() {
        let a = adapter_with("a", 7);
        let b = adapter_with("b", 8);
        let expected = a.effective_delta("l").unwrap() * 0.3
            + b.effective_delta("l").unwrap() * 0.7;
        let merged = weighted_average_merge(&[a, b], Some(&[0.3, 0.7])).unwrap();
        assert!((&merged["l"].matrix - expected).norm() < 1e-12);
    }

    #[test]
    fn sum_of_opposite_adapters_is_zero() {
        let a = adapter_with("a", 9);
        let mut b = a.clone();
        b.concept_id = "b".to_string();
        let layer = b.layers.get_mut("l").unwrap();
        layer.up = -layer.up.clone();
        let merged = sum_merge(&[a, b]).unwrap();
        assert!(merged["l"].matrix.norm() < 1e-12);
    }

    #[test]
    fn sum_of_single_adapter_is_its_delta() {
        let a = adapter_with("a", 10);
        let expected = a.effective_delta("l").unwrap();
        let merged = sum_merge(&[a]).unwrap();
        assert_eq!(merged["l"].matrix, expected);
    }

    #[test]
    fn averaging_is_linear_in_each_delta() {
        let a = adapter_with("a", 11);
        let b = adapter_with("b", 12);
        let mut scaled = a.clone();
        scaled.layers.get_mut("l").unwrap().up *= 3.0;
        let merged = weighted_average_merge(&[a.clone(), b.clone()], None).unwrap();
        let merged_scaled = weighted_average_merge(&[scaled, b.clone()], None).unwrap();
        // contribution of `a` scales by 3, contribution of `b` is unchanged
        let diff = &merged_scaled["l"].matrix - &merged["l"].matrix;
        let expected = a.effective_delta("l").unwrap() * (3.0 - 1.0) * 0.5;
        assert!((diff - expected).norm() < 1e-12);
    }
}
