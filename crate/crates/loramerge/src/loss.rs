//! The merge objective: per-probe positive/negative distances, the hinge
//! contrastive loss, the delta-magnitude penalty, and the exact gradient of
//! the total with respect to the merged delta.
//!
//! With N concepts and n probes each, the contrastive part is
//!
//! ```text
//! (1/(N*n)) * sum over concepts i and probes k of
//!     d_p(i,k)^2 + max(0, margin - d_n(i,k))^2
//! ```
//!
//! where `d_p(i,k)` is the distance between concept i's target and predicted
//! feature columns and `d_n(i,k)` is the minimum distance from concept i's
//! target column to any other concept's predicted column (matched by probe
//! index). With a single concept the negative term is defined as zero. The
//! penalty adds `lambda_delta * ||delta||_F`, unsquared.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::adapter::BaseWeights;
use crate::config::MergeConfig;
use crate::error::{MergeError, Result};
use crate::merge::LayerDelta;
use crate::probes::{predict_features, FeatureSet, ProbeSet};

/// Loss value split into its three additive terms. `total` is always the
/// exact sum of the terms.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub positive_term: f64,
    pub negative_term: f64,
    pub penalty_term: f64,
    pub total: f64,
    /// Mean positive distance per concept, for diagnostics.
    pub per_concept_positive_mean: BTreeMap<String, f64>,
}

/// Contrastive part of the loss with its two terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTerms {
    pub loss: f64,
    pub positive_term: f64,
    pub negative_term: f64,
    pub per_concept_positive_mean: BTreeMap<String, f64>,
}

fn check_pair(target: &FeatureSet, predicted: &FeatureSet) -> Result<()> {
    if target.concept_id != predicted.concept_id || target.layer_id != predicted.layer_id {
        return Err(MergeError::ShapeMismatch(format!(
            "feature sets disagree: target ({}, {}) vs predicted ({}, {})",
            target.concept_id, target.layer_id, predicted.concept_id, predicted.layer_id
        )));
    }
    if target.matrix.shape() != predicted.matrix.shape() {
        return Err(MergeError::ShapeMismatch(format!(
            "feature matrices disagree: {:?} vs {:?}",
            target.matrix.shape(),
            predicted.matrix.shape()
        )));
    }
    Ok(())
}

/// Per-probe Euclidean distance between a concept's target features and the
/// merged model's prediction for the same concept.
pub fn positive_distances(target: &FeatureSet, predicted: &FeatureSet) -> Result<Vec<f64>> {
    check_pair(target, predicted)?;
    let n = target.matrix.ncols();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push((target.matrix.column(k) - predicted.matrix.column(k)).norm());
    }
    Ok(out)
}

/// Per-probe minimum distance from a concept's target features to the
/// predictions of every other concept, matched by probe index. Also returns
/// which entry of `predicted_others` attained the minimum; ties break toward
/// the earliest entry.
pub fn negative_distances(
    target: &FeatureSet,
    predicted_others: &[&FeatureSet],
) -> Result<(Vec<f64>, Vec<usize>)> {
    if predicted_others.is_empty() {
        return Err(MergeError::NoNegatives);
    }
    let n = target.matrix.ncols();
    let d_out = target.matrix.nrows();
    for other in predicted_others {
        if other.matrix.shape() != (d_out, n) {
            return Err(MergeError::ShapeMismatch(format!(
                "negative set for {} has shape {:?}, expected ({d_out}, {n})",
                other.concept_id,
                other.matrix.shape()
            )));
        }
    }
    let mut distances = Vec::with_capacity(n);
    let mut argmins = Vec::with_capacity(n);
    for k in 0..n {
        let mut best = f64::INFINITY;
        let mut best_idx = 0usize;
        for (idx, other) in predicted_others.iter().enumerate() {
            let d = (target.matrix.column(k) - other.matrix.column(k)).norm();
            if d < best {
                best = d;
                best_idx = idx;
            }
        }
        distances.push(best);
        argmins.push(best_idx);
    }
    Ok((distances, argmins))
}

/// Per concept and probe: the global index of the nearest other concept and
/// the distance to it. Empty when there is a single concept.
type NegativeTable = Vec<Vec<(usize, f64)>>;

fn contrastive_eval(
    all_targets: &[FeatureSet],
    all_predicted: &[FeatureSet],
    margin: f64,
) -> Result<(ContrastiveTerms, NegativeTable)> {
    let n_concepts = all_targets.len();
    if n_concepts == 0 || all_predicted.len() != n_concepts {
        return Err(MergeError::ShapeMismatch(format!(
            "{} target sets vs {} predicted sets",
            n_concepts,
            all_predicted.len()
        )));
    }
    let n = all_targets[0].matrix.ncols();
    for (target, predicted) in all_targets.iter().zip(all_predicted) {
        check_pair(target, predicted)?;
        if target.matrix.ncols() != n {
            return Err(MergeError::ShapeMismatch(format!(
                "concept {} has {} probes, expected {n}",
                target.concept_id,
                target.matrix.ncols()
            )));
        }
    }
    if n == 0 {
        return Err(MergeError::ShapeMismatch(
            "feature sets hold zero probes".to_string(),
        ));
    }

    let scale = 1.0 / (n_concepts * n) as f64;
    let mut positive_sq = 0.0;
    let mut negative_sq = 0.0;
    let mut per_concept = BTreeMap::new();
    let mut negatives: NegativeTable = Vec::with_capacity(n_concepts);

    for i in 0..n_concepts {
        let d_p = positive_distances(&all_targets[i], &all_predicted[i])?;
        positive_sq += d_p.iter().map(|d| d * d).sum::<f64>();
        per_concept.insert(
            all_targets[i].concept_id.clone(),
            d_p.iter().sum::<f64>() / n as f64,
        );

        if n_concepts > 1 {
            let others: Vec<&FeatureSet> = all_predicted
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| f)
                .collect();
            let (d_n, argmin) = negative_distances(&all_targets[i], &others)?;
            negative_sq += d_n
                .iter()
                .map(|&d| {
                    let gap = margin - d;
                    if gap > 0.0 {
                        gap * gap
                    } else {
                        0.0
                    }
                })
                .sum::<f64>();
            // map indices into `others` back to global concept indices
            negatives.push(
                d_n.iter()
                    .zip(&argmin)
                    .map(|(&d, &idx)| {
                        let global = if idx < i { idx } else { idx + 1 };
                        (global, d)
                    })
                    .collect(),
            );
        } else {
            negatives.push(Vec::new());
        }
    }

    let positive_term = scale * positive_sq;
    let negative_term = scale * negative_sq;
    Ok((
        ContrastiveTerms {
            loss: positive_term + negative_term,
            positive_term,
            negative_term,
            per_concept_positive_mean: per_concept,
        },
        negatives,
    ))
}

/// Hinge contrastive loss averaged over all N*n (concept, probe) terms.
pub fn contrastive_loss(
    all_targets: &[FeatureSet],
    all_predicted: &[FeatureSet],
    margin: f64,
) -> Result<ContrastiveTerms> {
    contrastive_eval(all_targets, all_predicted, margin).map(|(terms, _)| terms)
}

/// `lambda_delta * ||delta||_F`, the unsquared magnitude penalty.
pub fn delta_penalty(delta: &LayerDelta, lambda_delta: f64) -> f64 {
    lambda_delta * delta.matrix.norm()
}

/// Contrastive loss plus delta penalty, with the breakdown populated. The
/// `total` field is the exact sum of the three terms.
pub fn total_loss(
    config: &MergeConfig,
    all_targets: &[FeatureSet],
    all_predicted: &[FeatureSet],
    delta: &LayerDelta,
) -> Result<LossBreakdown> {
    let terms = contrastive_loss(all_targets, all_predicted, config.margin)?;
    Ok(assemble_breakdown(config, terms, delta))
}

fn assemble_breakdown(
    config: &MergeConfig,
    terms: ContrastiveTerms,
    delta: &LayerDelta,
) -> LossBreakdown {
    let penalty_term = delta_penalty(delta, config.lambda_delta);
    LossBreakdown {
        positive_term: terms.positive_term,
        negative_term: terms.negative_term,
        penalty_term,
        total: terms.positive_term + terms.negative_term + penalty_term,
        per_concept_positive_mean: terms.per_concept_positive_mean,
    }
}

/// Exact gradient of [`total_loss`] with respect to the delta matrix.
///
/// Predictions are recomputed from `delta` and `probes` so the gradient is
/// always evaluated at the same point as the loss. Per probe, the positive
/// part contributes `(2/(N*n)) * (y_hat - y) * x^T`; an active hinge
/// (`d_n < margin`) contributes
/// `(2/(N*n)) * (margin - d_n) * (y_i - y_hat_j*) * x_j*^T / max(d_n, eps)`
/// with `j*` the nearest other concept; the penalty contributes
/// `lambda_delta * delta / max(||delta||_F, eps)` with subgradient zero at
/// the origin.
pub fn loss_gradient(
    config: &MergeConfig,
    targets: &[FeatureSet],
    probes: &[ProbeSet],
    delta: &LayerDelta,
    base: Option<&BaseWeights>,
) -> Result<DMatrix<f64>> {
    evaluate_with_gradient(config, targets, probes, delta, base).map(|(_, grad)| grad)
}

/// One full evaluation: loss breakdown and gradient at the current delta,
/// sharing the predicted features and distance computations.
pub(crate) fn evaluate_with_gradient(
    config: &MergeConfig,
    targets: &[FeatureSet],
    probes: &[ProbeSet],
    delta: &LayerDelta,
    base: Option<&BaseWeights>,
) -> Result<(LossBreakdown, DMatrix<f64>)> {
    if targets.len() != probes.len() {
        return Err(MergeError::ShapeMismatch(format!(
            "{} target sets vs {} probe sets",
            targets.len(),
            probes.len()
        )));
    }
    let predicted: Vec<FeatureSet> = probes
        .iter()
        .map(|p| predict_features(delta, p, base))
        .collect::<Result<_>>()?;
    let (terms, negatives) = contrastive_eval(targets, &predicted, config.margin)?;

    let n_concepts = targets.len();
    let n = probes[0].matrix.ncols();
    let (d_out, d_in) = delta.matrix.shape();
    let scale = 2.0 / (n_concepts * n) as f64;
    let mut grad = DMatrix::zeros(d_out, d_in);

    for i in 0..n_concepts {
        let residual = &predicted[i].matrix - &targets[i].matrix;
        grad.gemm(scale, &residual, &probes[i].matrix.transpose(), 1.0);
    }

    for i in 0..n_concepts {
        for (k, &(j, d_n)) in negatives[i].iter().enumerate() {
            if d_n < config.margin {
                let coeff = scale * (config.margin - d_n) / d_n.max(config.epsilon);
                let v = targets[i].matrix.column(k) - predicted[j].matrix.column(k);
                grad.ger(coeff, &v, &probes[j].matrix.column(k), 1.0);
            }
        }
    }

    if config.lambda_delta > 0.0 {
        let norm = delta.matrix.norm();
        if norm >= config.epsilon {
            grad.axpy(config.lambda_delta / norm, &delta.matrix, 1.0);
        }
    }

    Ok((assemble_breakdown(config, terms, delta), grad))
}
