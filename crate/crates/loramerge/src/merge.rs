//! Gradient-descent merging: one dense delta per layer, learned from zero
//! against the contrastive objective.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::adapter::{validate_compatibility, BaseWeights, LoraAdapter};
use crate::config::{MergeConfig, Mode, OptimizerKind, DIVERGENCE_FACTOR, PLATEAU_WINDOW};
use crate::error::{MergeError, Result};
use crate::loss::{evaluate_with_gradient, LossBreakdown};
use crate::metrics::{fidelity_metrics, MergeReport};
use crate::probes::{sample_probes, target_features, FeatureSet, ProbeBank, ProbeSet};

/// The dense learned merge matrix for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDelta {
    pub layer_id: String,
    pub matrix: DMatrix<f64>,
}

impl LayerDelta {
    pub fn new(layer_id: impl Into<String>, matrix: DMatrix<f64>) -> Self {
        Self {
            layer_id: layer_id.into(),
            matrix,
        }
    }

    pub fn zeros(layer_id: impl Into<String>, d_out: usize, d_in: usize) -> Self {
        Self::new(layer_id, DMatrix::zeros(d_out, d_in))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.norm()
    }
}

/// Everything a merge run produces: the deltas, the full per-layer loss
/// traces, and the summary report.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub deltas: BTreeMap<String, LayerDelta>,
    pub traces: BTreeMap<String, Vec<LossBreakdown>>,
    pub report: MergeReport,
}

fn check_mode(config: &MergeConfig, base: Option<&BaseWeights>) -> Result<()> {
    match (config.mode, base) {
        (Mode::Full, None) => Err(MergeError::InvalidConfig(
            "full mode requires base weights".to_string(),
        )),
        (Mode::DeltaOnly, Some(_)) => Err(MergeError::InvalidConfig(
            "base weights are only used in full mode".to_string(),
        )),
        _ => Ok(()),
    }
}

fn check_concepts(adapters: &[LoraAdapter]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for adapter in adapters {
        if !seen.insert(adapter.concept_id.as_str()) {
            return Err(MergeError::DuplicateConcept(adapter.concept_id.clone()));
        }
    }
    Ok(())
}

/// Fetch probes for one (concept, layer) from the provided bank, or sample
/// fresh Gaussian probes.
fn resolve_probes(
    config: &MergeConfig,
    concept_id: &str,
    layer_id: &str,
    d_in: usize,
    provided: Option<&ProbeBank>,
) -> Result<ProbeSet> {
    match provided {
        Some(bank) => {
            let set = bank.get(concept_id, layer_id).ok_or_else(|| {
                MergeError::InvalidConfig(format!(
                    "probe bank has no entry for concept {concept_id}, layer {layer_id}"
                ))
            })?;
            if set.d_in() != d_in {
                return Err(MergeError::ShapeMismatch(format!(
                    "probes for ({concept_id}, {layer_id}) have {} rows, layer expects {d_in}",
                    set.d_in()
                )));
            }
            if set.is_empty() {
                return Err(MergeError::ShapeMismatch(format!(
                    "probes for ({concept_id}, {layer_id}) hold zero columns"
                )));
            }
            Ok(set.clone())
        }
        None => Ok(sample_probes(
            concept_id,
            layer_id,
            d_in,
            config.probes_for(d_in),
            config.seed,
        )),
    }
}

struct AdamState {
    first: DMatrix<f64>,
    second: DMatrix<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(
    config: &MergeConfig,
    delta: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
    step: usize,
    adam: &mut Option<AdamState>,
) {
    match config.optimizer {
        OptimizerKind::Gd => delta.axpy(-config.learning_rate, grad, 1.0),
        OptimizerKind::Adam => {
            let state = adam.get_or_insert_with(|| AdamState {
                first: DMatrix::zeros(delta.nrows(), delta.ncols()),
                second: DMatrix::zeros(delta.nrows(), delta.ncols()),
            });
            let t = (step + 1) as i32;
            state.first.axpy(1.0 - ADAM_BETA1, grad, ADAM_BETA1);
            state
                .second
                .zip_apply(grad, |s, g| *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g);
            let bias1 = 1.0 - ADAM_BETA1.powi(t);
            let bias2 = 1.0 - ADAM_BETA2.powi(t);
            for i in 0..delta.nrows() {
                for j in 0..delta.ncols() {
                    let m_hat = state.first[(i, j)] / bias1;
                    let v_hat = state.second[(i, j)] / bias2;
                    delta[(i, j)] -= config.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Merge one layer across adapters. The delta starts at zero, probes are
/// fixed once per concept, and full-batch descent runs until `max_steps`, a
/// loss plateau, or divergence. The returned trace has one breakdown per
/// evaluated step; its last entry is the loss at the returned delta.
pub fn merge_layer(
    config: &MergeConfig,
    layer_id: &str,
    adapters: &[LoraAdapter],
    base: Option<&BaseWeights>,
    provided_probes: Option<&ProbeBank>,
) -> Result<(LayerDelta, Vec<LossBreakdown>)> {
    config.validate()?;
    check_mode(config, base)?;
    check_concepts(adapters)?;
    if adapters.is_empty() {
        return Err(MergeError::InvalidConfig(
            "at least one adapter is required".to_string(),
        ));
    }

    let mut shape: Option<(usize, usize)> = None;
    for adapter in adapters {
        let layer = adapter
            .layers
            .get(layer_id)
            .ok_or_else(|| MergeError::UnknownLayer(layer_id.to_string()))?;
        let this = (layer.d_out(), layer.d_in());
        match shape {
            None => shape = Some(this),
            Some(expected) if expected != this => {
                return Err(MergeError::ShapeMismatch(format!(
                    "layer {layer_id}: {}x{} in adapter {} vs {}x{}",
                    this.0, this.1, adapter.concept_id, expected.0, expected.1
                )));
            }
            Some(_) => {}
        }
    }
    let (d_out, d_in) = shape.expect("adapters is non-empty");

    let mut probes = Vec::with_capacity(adapters.len());
    let mut targets: Vec<FeatureSet> = Vec::with_capacity(adapters.len());
    for adapter in adapters {
        let set = resolve_probes(config, &adapter.concept_id, layer_id, d_in, provided_probes)?;
        targets.push(target_features(adapter, layer_id, &set, base)?);
        probes.push(set);
    }
    let n = probes[0].len();
    for set in &probes {
        if set.len() != n {
            return Err(MergeError::ShapeMismatch(format!(
                "layer {layer_id}: probe counts differ across concepts ({} vs {n})",
                set.len()
            )));
        }
    }

    let mut delta = LayerDelta::zeros(layer_id, d_out, d_in);
    let mut adam = None;
    let mut trace: Vec<LossBreakdown> = Vec::new();
    let mut initial_total = None;
    let mut pending_update = false;

    for step in 0..config.max_steps {
        let (breakdown, grad) =
            evaluate_with_gradient(config, &targets, &probes, &delta, base)?;
        if !breakdown.total.is_finite() {
            return Err(MergeError::NonFiniteLoss {
                layer: layer_id.to_string(),
                step,
            });
        }
        let total = breakdown.total;
        trace.push(breakdown);
        pending_update = false;

        let initial = *initial_total.get_or_insert(total);
        if initial > 0.0 && total > DIVERGENCE_FACTOR * initial {
            return Err(MergeError::NonFiniteLoss {
                layer: layer_id.to_string(),
                step,
            });
        }
        if step >= PLATEAU_WINDOW {
            let reference = trace[step - PLATEAU_WINDOW].total;
            if (reference - total).abs() <= config.plateau_tol * reference.abs().max(f64::MIN_POSITIVE)
            {
                break;
            }
        }

        apply_update(config, &mut delta.matrix, &grad, step, &mut adam);
        pending_update = true;
    }

    if pending_update {
        let (breakdown, _) = evaluate_with_gradient(config, &targets, &probes, &delta, base)?;
        if !breakdown.total.is_finite() {
            return Err(MergeError::NonFiniteLoss {
                layer: layer_id.to_string(),
                step: config.max_steps,
            });
        }
        trace.push(breakdown);
    }

    Ok((delta, trace))
}

/// Merge every layer the adapters share. Layers are independent and run in
/// parallel; results are identical to sequential execution. Any layer
/// failure aborts the whole merge.
pub fn merge_adapters(
    config: &MergeConfig,
    adapters: &[LoraAdapter],
    base: Option<&BaseWeights>,
    provided_probes: Option<&ProbeBank>,
) -> Result<MergeOutcome> {
    config.validate()?;
    check_mode(config, base)?;
    check_concepts(adapters)?;
    let start = Instant::now();
    let plan = validate_compatibility(adapters, base)?;

    // resolve every probe set up front so merging and the report metrics
    // see exactly the same inputs
    let mut bank = ProbeBank::new();
    for planned in &plan.layers {
        for adapter in adapters {
            let set = resolve_probes(
                config,
                &adapter.concept_id,
                &planned.layer_id,
                planned.d_in,
                provided_probes,
            )?;
            bank.insert(set);
        }
    }

    let results: Vec<Result<(LayerDelta, Vec<LossBreakdown>)>> = plan
        .layers
        .par_iter()
        .map(|planned| merge_layer(config, &planned.layer_id, adapters, base, Some(&bank)))
        .collect();

    let mut deltas = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for (planned, result) in plan.layers.iter().zip(results) {
        let (delta, trace) = result?;
        deltas.insert(planned.layer_id.clone(), delta);
        traces.insert(planned.layer_id.clone(), trace);
    }

    let mut report = fidelity_metrics(&deltas, adapters, &bank, base, config)?;
    report.loss_trace_summary = traces
        .iter()
        .map(|(layer, trace)| {
            let last = trace.last().expect("trace is never empty").clone();
            (layer.clone(), last)
        })
        .collect();
    report.wall_time = start.elapsed().as_secs_f64();

    Ok(MergeOutcome {
        deltas,
        traces,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LoraLayer;
    use crate::container::Dtype;
    use crate::rng::{gaussian_matrix, keyed_rng};

    fn random_adapter(concept: &str, layers: &[(&str, usize, usize)], rank: usize, key: u64) -> LoraAdapter {
        let mut adapter = LoraAdapter::new(concept);
        for (layer_id, d_out, d_in) in layers {
            let mut rng = keyed_rng(key, "test-adapter", &[concept, layer_id]);
            let up = gaussian_matrix(&mut rng, *d_out, rank);
            let down = gaussian_matrix(&mut rng, rank, *d_in);
            adapter.insert(LoraLayer::new(*layer_id, up, down, rank as f64, Dtype::F32).unwrap());
        }
        adapter
    }

    fn recovery_config() -> MergeConfig {
        MergeConfig {
            lambda_delta: 0.0,
            learning_rate: 0.05,
            max_steps: 4000,
            probe_count: Some(32),
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn single_concept_recovers_its_own_delta() {
        let adapter = random_adapter("solo", &[("l", 8, 8)], 2, 1);
        let truth = adapter.effective_delta("l").unwrap();
        let config = recovery_config();
        let (delta, trace) = merge_layer(&config, "l", &[adapter], None, None).unwrap();
        let rel = (&delta.matrix - &truth).norm() / truth.norm();
        assert!(rel < 1e-2, "relative error {rel}");
        assert!(trace.len() >= 2);
        assert!(trace.last().unwrap().total < trace[0].total);
    }

    #[test]
    fn zero_adapter_keeps_delta_at_zero() {
        let mut adapter = LoraAdapter::new("zero");
        adapter.insert(
            LoraLayer::new(
                "l",
                DMatrix::zeros(4, 2),
                DMatrix::zeros(2, 6),
                2.0,
                Dtype::F32,
            )
            .unwrap(),
        );
        let config = MergeConfig {
            lambda_delta: 0.0,
            max_steps: 50,
            ..Default::default()
        };
        let (delta, trace) = merge_layer(&config, "l", &[adapter], None, None).unwrap();
        assert_eq!(delta.matrix, DMatrix::zeros(4, 6));
        assert!(trace.iter().all(|b| b.total == 0.0));
    }

    #[test]
    fn merge_is_deterministic() {
        let adapters = vec![
            random_adapter("a", &[("l", 6, 6)], 2, 2),
            random_adapter("b", &[("l", 6, 6)], 2, 3),
        ];
        let config = MergeConfig {
            max_steps: 60,
            probe_count: Some(16),
            seed: 9,
            ..Default::default()
        };
        let one = merge_adapters(&config, &adapters, None, None).unwrap();
        let two = merge_adapters(&config, &adapters, None, None).unwrap();
        assert_eq!(one.deltas, two.deltas);
    }

    #[test]
    fn layers_merge_independently() {
        let adapters = vec![
            random_adapter("a", &[("l0", 6, 6), ("l1", 6, 6)], 2, 4),
            random_adapter("b", &[("l0", 6, 6), ("l1", 6, 6)], 2, 5),
        ];
        let config = MergeConfig {
            max_steps: 40,
            probe_count: Some(12),
            seed: 13,
            ..Default::default()
        };
        let joint = merge_adapters(&config, &adapters, None, None).unwrap();
        for layer in ["l0", "l1"] {
            let (alone, _) = merge_layer(&config, layer, &adapters, None, None).unwrap();
            assert_eq!(joint.deltas[layer].matrix, alone.matrix);
        }
    }

    #[test]
    fn disjoint_adapters_abort_whole_merge() {
        let a = random_adapter("a", &[("only_a", 4, 4)], 1, 6);
        let b = random_adapter("b", &[("only_b", 4, 4)], 1, 7);
        let err = merge_adapters(&MergeConfig::default(), &[a, b], None, None).unwrap_err();
        assert!(matches!(err, MergeError::EmptyIntersection));
    }

    #[test]
    fn duplicate_concept_ids_are_rejected() {
        let a = random_adapter("same", &[("l", 4, 4)], 1, 6);
        let b = random_adapter("same", &[("l", 4, 4)], 1, 7);
        let err = merge_adapters(&MergeConfig::default(), &[a, b], None, None).unwrap_err();
        assert!(matches!(err, MergeError::DuplicateConcept(_)));
    }

    #[test]
    fn full_mode_without_base_is_invalid() {
        let a = random_adapter("a", &[("l", 4, 4)], 1, 6);
        let config = MergeConfig {
            mode: Mode::Full,
            ..Default::default()
        };
        let err = merge_adapters(&config, &[a], None, None).unwrap_err();
        assert!(matches!(err, MergeError::InvalidConfig(_)));
    }

    #[test]
    fn divergent_learning_rate_reports_nonfinite_loss() {
        let adapters = vec![
            random_adapter("a", &[("l", 6, 6)], 2, 8),
            random_adapter("b", &[("l", 6, 6)], 2, 9),
        ];
        let config = MergeConfig {
            learning_rate: 50.0,
            max_steps: 400,
            probe_count: Some(16),
            ..Default::default()
        };
        let err = merge_adapters(&config, &adapters, None, None).unwrap_err();
        assert!(matches!(err, MergeError::NonFiniteLoss { .. }));
    }

    #[test]
    fn adam_mode_converges_on_single_concept() {
        let adapter = random_adapter("solo", &[("l", 8, 8)], 2, 10);
        let truth = adapter.effective_delta("l").unwrap();
        let config = MergeConfig {
            lambda_delta: 0.0,
            learning_rate: 0.05,
            max_steps: 2000,
            probe_count: Some(32),
            optimizer: OptimizerKind::Adam,
            ..Default::default()
        };
        let (delta, _) = merge_layer(&config, "l", &[adapter], None, None).unwrap();
        let rel = (&delta.matrix - &truth).norm() / truth.norm();
        assert!(rel < 5e-2, "relative error {rel}");
    }

    #[test]
    fn plateau_stops_before_max_steps() {
        let mut adapter = LoraAdapter::new("flat");
        adapter.insert(
            LoraLayer::new(
                "l",
                DMatrix::zeros(4, 2),
                DMatrix::zeros(2, 6),
                2.0,
                Dtype::F32,
            )
            .unwrap(),
        );
        let config = MergeConfig {
            lambda_delta: 0.0,
            max_steps: 100_000,
            ..Default::default()
        };
        let (_, trace) = merge_layer(&config, "l", &[adapter], None, None).unwrap();
        assert!(trace.len() <= PLATEAU_WINDOW + 2);
    }

    #[test]
    fn report_echoes_config_and_final_losses() {
        let adapters = vec![
            random_adapter("a", &[("l", 6, 6)], 2, 2),
            random_adapter("b", &[("l", 6, 6)], 2, 3),
        ];
        let config = MergeConfig {
            max_steps: 30,
            probe_count: Some(12),
            ..Default::default()
        };
        let outcome = merge_adapters(&config, &adapters, None, None).unwrap();
        assert_eq!(outcome.report.config_echo, config);
        let summary = &outcome.report.loss_trace_summary["l"];
        assert_eq!(summary.total, outcome.traces["l"].last().unwrap().total);
        assert!(outcome.report.wall_time >= 0.0);
    }
}
