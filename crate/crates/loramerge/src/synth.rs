//! Synthetic concept families with controllable row-space overlap.
//!
//! At overlap 0 each concept's down-factor rows come from a disjoint block
//! of one random orthonormal basis of input space, so concept j's delta
//! annihilates any probe drawn from concept i's row-space (j != i). The sum
//! of the deltas is then an exact merged solution, which makes the suite an
//! oracle for merge quality. At overlap 1 every concept shares one
//! row-space; intermediate values interpolate.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adapter::{LoraAdapter, LoraLayer};
use crate::container::Dtype;
use crate::error::{MergeError, Result};
use crate::probes::{ProbeBank, ProbeSet};
use crate::rng::{gaussian_matrix, keyed_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer_id: String,
    pub d_out: usize,
    pub d_in: usize,
}

impl LayerShape {
    pub fn new(layer_id: impl Into<String>, d_out: usize, d_in: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            d_out,
            d_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_concepts: usize,
    pub layers: Vec<LayerShape>,
    pub rank: usize,
    /// 0 = mutually orthogonal row-spaces, 1 = one shared row-space.
    pub overlap: f64,
    /// Magnitude of the up factors.
    pub scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_concepts == 0 {
            return Err(MergeError::SpecInfeasible(
                "n_concepts must be at least 1".to_string(),
            ));
        }
        if self.rank == 0 {
            return Err(MergeError::SpecInfeasible(
                "rank must be at least 1".to_string(),
            ));
        }
        if self.layers.is_empty() {
            return Err(MergeError::SpecInfeasible(
                "at least one layer is required".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(MergeError::SpecInfeasible(format!(
                "overlap must lie in [0, 1], got {}",
                self.overlap
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(MergeError::SpecInfeasible(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        for layer in &self.layers {
            if self.rank > layer.d_out.min(layer.d_in) {
                return Err(MergeError::SpecInfeasible(format!(
                    "rank {} exceeds min({}, {}) for layer {}",
                    self.rank, layer.d_out, layer.d_in, layer.layer_id
                )));
            }
            if self.overlap == 0.0 && self.n_concepts * self.rank > layer.d_in {
                return Err(MergeError::SpecInfeasible(format!(
                    "{} disjoint rank-{} subspaces do not fit in d_in = {} (layer {})",
                    self.n_concepts, self.rank, layer.d_in, layer.layer_id
                )));
            }
        }
        Ok(())
    }

    pub fn concept_ids(&self) -> Vec<String> {
        (0..self.n_concepts)
            .map(|i| format!("concept{i:03}"))
            .collect()
    }
}

/// Generated adapters plus their ground-truth deltas and the row-space
/// probes that make the orthogonality construction exact.
#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub adapters: Vec<LoraAdapter>,
    /// concept_id -> layer_id -> exact effective delta.
    pub truth: BTreeMap<String, BTreeMap<String, DMatrix<f64>>>,
    pub probes: ProbeBank,
}

fn orthonormal_columns(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = m.ncols();
    let qr = m.qr();
    let r = qr.r();
    for i in 0..cols {
        if r[(i, i)].abs() < 1e-10 {
            return Err(MergeError::SpecInfeasible(
                "degenerate basis interpolation".to_string(),
            ));
        }
    }
    Ok(qr.q())
}

/// Generate `spec.n_concepts` adapters with `probe_count` probes per concept
/// per layer, each probe drawn inside its concept's row-space.
pub fn synth_adapters(spec: &SyntheticSpec, probe_count: usize) -> Result<SyntheticSuite> {
    spec.validate()?;
    if probe_count == 0 {
        return Err(MergeError::SpecInfeasible(
            "probe_count must be at least 1".to_string(),
        ));
    }
    let concept_ids = spec.concept_ids();
    let mut adapters: Vec<LoraAdapter> = concept_ids
        .iter()
        .map(|id| LoraAdapter::new(id.clone()))
        .collect();
    let mut truth: BTreeMap<String, BTreeMap<String, DMatrix<f64>>> = concept_ids
        .iter()
        .map(|id| (id.clone(), BTreeMap::new()))
        .collect();
    let mut probes = ProbeBank::new();

    for layer in &spec.layers {
        let mut basis_rng = keyed_rng(spec.seed, "synth-basis", &[&layer.layer_id]);
        let basis = orthonormal_columns(gaussian_matrix(
            &mut basis_rng,
            layer.d_in,
            layer.d_in,
        ))?;
        let shared = basis.columns(0, spec.rank).into_owned();
        let blocks_fit = spec.n_concepts * spec.rank <= layer.d_in;

        for (i, concept_id) in concept_ids.iter().enumerate() {
            let frame = if spec.overlap == 0.0 {
                basis.columns(i * spec.rank, spec.rank).into_owned()
            } else {
                let start = if blocks_fit {
                    basis.columns(i * spec.rank, spec.rank).into_owned()
                } else {
                    let mut frame_rng =
                        keyed_rng(spec.seed, "synth-frame", &[&layer.layer_id, concept_id]);
                    orthonormal_columns(gaussian_matrix(
                        &mut frame_rng,
                        layer.d_in,
                        spec.rank,
                    ))?
                };
                if spec.overlap == 1.0 {
                    shared.clone()
                } else {
                    let mix = start * (1.0 - spec.overlap) + &shared * spec.overlap;
                    orthonormal_columns(mix)?
                }
            };

            let mut up_rng = keyed_rng(spec.seed, "synth-up", &[&layer.layer_id, concept_id]);
            let up = gaussian_matrix(&mut up_rng, layer.d_out, spec.rank) * spec.scale;
            let down = frame.transpose();
            let lora = LoraLayer::new(
                layer.layer_id.clone(),
                up,
                down,
                spec.rank as f64,
                Dtype::F32,
            )?;
            truth
                .get_mut(concept_id)
                .unwrap()
                .insert(layer.layer_id.clone(), lora.effective_delta());
            adapters[i].insert(lora);

            let mut probe_rng =
                keyed_rng(spec.seed, "synth-probe", &[&layer.layer_id, concept_id]);
            let coords = gaussian_matrix(&mut probe_rng, spec.rank, probe_count);
            probes.insert(ProbeSet {
                concept_id: concept_id.clone(),
                layer_id: layer.layer_id.clone(),
                seed: spec.seed,
                matrix: &frame * coords,
            });
        }
    }

    Ok(SyntheticSuite {
        adapters,
        truth,
        probes,
    })
}
