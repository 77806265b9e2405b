//! Fidelity, interference, and retrieval metrics for a merged model.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{BaseWeights, LoraAdapter};
use crate::config::MergeConfig;
use crate::error::{MergeError, Result};
use crate::loss::LossBreakdown;
use crate::merge::LayerDelta;
use crate::probes::{predict_features, target_features, FeatureSet, ProbeBank};

/// Summary of one merge or evaluation run.
///
/// Fidelity is the relative output error per concept, averaged over layers;
/// retrieval accuracy is the fraction of (concept, probe, layer) triples
/// whose merged prediction lies nearest its own concept's target column.
/// These act as desk-scale stand-ins for image- and identity-alignment
/// scores, which need a full diffusion pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub per_concept_fidelity: BTreeMap<String, f64>,
    /// Fidelity of each adapter evaluated alone (before any merging).
    pub premerge_fidelity: BTreeMap<String, f64>,
    pub retrieval_accuracy: f64,
    /// Minimum distance between any concept's target column and another
    /// concept's predicted column. Infinite (JSON null) with one concept.
    pub min_cross_distance: f64,
    /// Final loss breakdown per layer; empty for evaluation-only runs.
    pub loss_trace_summary: BTreeMap<String, LossBreakdown>,
    /// Elapsed seconds. Not covered by determinism guarantees.
    pub wall_time: f64,
    pub config_echo: MergeConfig,
}

impl MergeReport {
    pub fn fidelity_mean(&self) -> f64 {
        if self.per_concept_fidelity.is_empty() {
            return 0.0;
        }
        self.per_concept_fidelity.values().sum::<f64>() / self.per_concept_fidelity.len() as f64
    }

    pub fn fidelity_max(&self) -> f64 {
        self.per_concept_fidelity
            .values()
            .fold(0.0f64, |acc, v| acc.max(*v))
    }
}

/// Score merged deltas against the adapters they were built from, using the
/// given probes. Probes must cover every (concept, layer) pair.
pub fn fidelity_metrics(
    deltas: &BTreeMap<String, LayerDelta>,
    adapters: &[LoraAdapter],
    probes: &ProbeBank,
    base: Option<&BaseWeights>,
    config: &MergeConfig,
) -> Result<MergeReport> {
    if deltas.is_empty() {
        return Err(MergeError::InvalidConfig(
            "no deltas to evaluate".to_string(),
        ));
    }
    if adapters.is_empty() {
        return Err(MergeError::InvalidConfig(
            "at least one adapter is required".to_string(),
        ));
    }
    let start = Instant::now();
    let n_concepts = adapters.len();
    let epsilon = config.epsilon;

    let mut fidelity_sums = vec![0.0f64; n_concepts];
    let mut premerge_sums = vec![0.0f64; n_concepts];
    let mut retrieved = 0usize;
    let mut retrieval_total = 0usize;
    let mut min_cross = f64::INFINITY;

    for (layer_id, delta) in deltas {
        let mut targets: Vec<FeatureSet> = Vec::with_capacity(n_concepts);
        let mut predicted: Vec<FeatureSet> = Vec::with_capacity(n_concepts);
        for adapter in adapters {
            let set = probes.get(&adapter.concept_id, layer_id).ok_or_else(|| {
                MergeError::InvalidConfig(format!(
                    "probe bank has no entry for concept {}, layer {layer_id}",
                    adapter.concept_id
                ))
            })?;
            let y = target_features(adapter, layer_id, set, base)?;
            let y_hat = predict_features(delta, set, base)?;
            let own = LayerDelta::new(
                layer_id.clone(),
                adapter
                    .effective_delta(layer_id)
                    .ok_or_else(|| MergeError::UnknownLayer(layer_id.clone()))?,
            );
            let y_pre = predict_features(&own, set, base)?;
            let norm = y.matrix.norm().max(epsilon);
            let idx = targets.len();
            fidelity_sums[idx] += (&y_hat.matrix - &y.matrix).norm() / norm;
            premerge_sums[idx] += (&y_pre.matrix - &y.matrix).norm() / norm;
            targets.push(y);
            predicted.push(y_hat);
        }

        let n = targets[0].matrix.ncols();
        for set in targets.iter().chain(predicted.iter()) {
            if set.matrix.ncols() != n {
                return Err(MergeError::ShapeMismatch(format!(
                    "layer {layer_id}: probe counts differ across concepts"
                )));
            }
        }

        for i in 0..n_concepts {
            for k in 0..n {
                let mut best = f64::INFINITY;
                let mut best_j = 0usize;
                for (j, target) in targets.iter().enumerate() {
                    let d = (predicted[i].matrix.column(k) - target.matrix.column(k)).norm();
                    if d < best {
                        best = d;
                        best_j = j;
                    }
                }
                retrieval_total += 1;
                if best_j == i {
                    retrieved += 1;
                }
                for (j, target) in targets.iter().enumerate() {
                    if j != i {
                        let cross =
                            (target.matrix.column(k) - predicted[i].matrix.column(k)).norm();
                        if cross < min_cross {
                            min_cross = cross;
                        }
                    }
                }
            }
        }
    }

    let n_layers = deltas.len() as f64;
    let per_concept_fidelity = adapters
        .iter()
        .zip(&fidelity_sums)
        .map(|(a, s)| (a.concept_id.clone(), s / n_layers))
        .collect();
    let premerge_fidelity = adapters
        .iter()
        .zip(&premerge_sums)
        .map(|(a, s)| (a.concept_id.clone(), s / n_layers))
        .collect();

    Ok(MergeReport {
        per_concept_fidelity,
        premerge_fidelity,
        retrieval_accuracy: retrieved as f64 / retrieval_total as f64,
        min_cross_distance: min_cross,
        loss_trace_summary: BTreeMap::new(),
        wall_time: start.elapsed().as_secs_f64(),
        config_echo: config.clone(),
    })
}
