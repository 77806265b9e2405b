//! Probe generation and feature computation.
//!
//! A probe set holds the input vectors X for one concept at one layer
//! (columns are probes). Target features are what a concept's own adapter
//! produces on its probes; predicted features are what a candidate merged
//! delta produces on the same probes.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::adapter::{ensure_finite, matrix_from_record, BaseWeights, LoraAdapter};
use crate::container::read_tensor_file;
use crate::error::{MergeError, Result};
use crate::merge::LayerDelta;
use crate::rng::{gaussian_matrix, keyed_rng};

pub const PROBE_SUFFIX: &str = ".probes";

/// Input probes for one (concept, layer): a d_in x n matrix, one probe per
/// column. Regenerating with the same key reproduces the matrix bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub concept_id: String,
    pub layer_id: String,
    pub seed: u64,
    pub matrix: DMatrix<f64>,
}

impl ProbeSet {
    pub fn d_in(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }
}

/// Output features for one (concept, layer): a d_out x n matrix aligned
/// column-for-column with the generating probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub concept_id: String,
    pub layer_id: String,
    pub matrix: DMatrix<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }
}

/// Draw n standard-normal probes for one concept at one layer. The stream is
/// keyed on (seed, concept_id, layer_id), so different concepts and layers
/// get independent probes and reruns reproduce them exactly.
pub fn sample_probes(
    concept_id: &str,
    layer_id: &str,
    d_in: usize,
    n: usize,
    seed: u64,
) -> ProbeSet {
    let mut rng = keyed_rng(seed, "probes", &[concept_id, layer_id]);
    ProbeSet {
        concept_id: concept_id.to_string(),
        layer_id: layer_id.to_string(),
        seed,
        matrix: gaussian_matrix(&mut rng, d_in, n),
    }
}

fn base_layer<'a>(
    base: Option<&'a BaseWeights>,
    layer_id: &str,
    d_out: usize,
    d_in: usize,
) -> Result<Option<&'a DMatrix<f64>>> {
    match base {
        None => Ok(None),
        Some(base) => {
            let w = base
                .layers
                .get(layer_id)
                .ok_or_else(|| MergeError::BaseMissingLayer(layer_id.to_string()))?;
            if w.shape() != (d_out, d_in) {
                return Err(MergeError::ShapeMismatch(format!(
                    "base layer {layer_id} is {}x{}, expected {d_out}x{d_in}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            Ok(Some(w))
        }
    }
}

/// Features a concept's own adapter produces on its probes: `delta * X` in
/// delta-only mode, `(W + delta) * X` when base weights are given.
pub fn target_features(
    adapter: &LoraAdapter,
    layer_id: &str,
    probes: &ProbeSet,
    base: Option<&BaseWeights>,
) -> Result<FeatureSet> {
    let layer = adapter
        .layers
        .get(layer_id)
        .ok_or_else(|| MergeError::UnknownLayer(layer_id.to_string()))?;
    if probes.d_in() != layer.d_in() {
        return Err(MergeError::ShapeMismatch(format!(
            "probes for layer {layer_id} have {} rows, layer expects {}",
            probes.d_in(),
            layer.d_in()
        )));
    }
    let delta = layer.effective_delta();
    let w = base_layer(base, layer_id, layer.d_out(), layer.d_in())?;
    let matrix = match w {
        None => &delta * &probes.matrix,
        Some(w) => (w + &delta) * &probes.matrix,
    };
    Ok(FeatureSet {
        concept_id: probes.concept_id.clone(),
        layer_id: layer_id.to_string(),
        matrix,
    })
}

/// Features a candidate merged delta produces on the given probes.
pub fn predict_features(
    delta: &LayerDelta,
    probes: &ProbeSet,
    base: Option<&BaseWeights>,
) -> Result<FeatureSet> {
    let (d_out, d_in) = delta.matrix.shape();
    if probes.d_in() != d_in {
        return Err(MergeError::ShapeMismatch(format!(
            "probes for layer {} have {} rows, delta expects {d_in}",
            delta.layer_id,
            probes.d_in()
        )));
    }
    let w = base_layer(base, &delta.layer_id, d_out, d_in)?;
    let matrix = match w {
        None => &delta.matrix * &probes.matrix,
        Some(w) => (w + &delta.matrix) * &probes.matrix,
    };
    Ok(FeatureSet {
        concept_id: probes.concept_id.clone(),
        layer_id: delta.layer_id.clone(),
        matrix,
    })
}

/// Probe sets keyed by (concept_id, layer_id). Used to hand externally
/// captured or synthetic-suite probes to the merge instead of fresh Gaussian
/// ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeBank {
    pub sets: BTreeMap<(String, String), ProbeSet>,
}

impl ProbeBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: ProbeSet) {
        self.sets
            .insert((set.concept_id.clone(), set.layer_id.clone()), set);
    }

    pub fn get(&self, concept_id: &str, layer_id: &str) -> Option<&ProbeSet> {
        self.sets
            .get(&(concept_id.to_string(), layer_id.to_string()))
    }
}

/// Read probes captured externally: one `{layer}.probes` tensor per layer,
/// shape [d_in, n]. The same matrix is assigned to the given concept for
/// every layer present in the file.
pub fn load_probe_file(
    path: impl AsRef<Path>,
    concept_id: &str,
    seed: u64,
) -> Result<BTreeMap<String, ProbeSet>> {
    let file = read_tensor_file(path)?;
    let mut out = BTreeMap::new();
    for (name, rec) in &file.tensors {
        if let Some(layer) = name.strip_suffix(PROBE_SUFFIX) {
            let matrix = matrix_from_record(rec)?;
            ensure_finite(name, &matrix)?;
            if matrix.ncols() == 0 {
                return Err(MergeError::ShapeMismatch(format!(
                    "tensor {name} holds zero probes"
                )));
            }
            out.insert(
                layer.to_string(),
                ProbeSet {
                    concept_id: concept_id.to_string(),
                    layer_id: layer.to_string(),
                    seed,
                    matrix,
                },
            );
        }
    }
    if out.is_empty() {
        return Err(MergeError::OrphanTensor(format!(
            "no `{PROBE_SUFFIX}` tensors in probe file"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LoraLayer;
    use crate::container::Dtype;

    fn identity_adapter(d: usize) -> LoraAdapter {
        // up = I_d, down = I_d, alpha = d -> effective delta = identity
        let mut adapter = LoraAdapter::new("id");
        adapter.insert(
            LoraLayer::new(
                "l",
                DMatrix::identity(d, d),
                DMatrix::identity(d, d),
                d as f64,
                Dtype::F32,
            )
            .unwrap(),
        );
        adapter
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_probes("cat", "l", 8, 16, 42);
        let b = sample_probes("cat", "l", 8, 16, 42);
        assert_eq!(a, b);
        assert_eq!(a.matrix.shape(), (8, 16));
    }

    #[test]
    fn seed_and_keys_change_probes() {
        let a = sample_probes("cat", "l", 8, 16, 42);
        let b = sample_probes("cat", "l", 8, 16, 43);
        let c = sample_probes("dog", "l", 8, 16, 42);
        let d = sample_probes("cat", "m", 8, 16, 42);
        assert_ne!(a.matrix, b.matrix);
        assert_ne!(a.matrix, c.matrix);
        assert_ne!(a.matrix, d.matrix);
    }

    #[test]
    fn zero_delta_yields_zero_targets() {
        let mut adapter = LoraAdapter::new("z");
        adapter.insert(
            LoraLayer::new(
                "l",
                DMatrix::zeros(3, 2),
                DMatrix::zeros(2, 4),
                2.0,
                Dtype::F32,
            )
            .unwrap(),
        );
        let probes = sample_probes("z", "l", 4, 5, 1);
        let y = target_features(&adapter, "l", &probes, None).unwrap();
        assert!(y.matrix.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_delta_reproduces_probes() {
        let adapter = identity_adapter(2);
        let probes = ProbeSet {
            concept_id: "id".to_string(),
            layer_id: "l".to_string(),
            seed: 0,
            matrix: DMatrix::identity(2, 2),
        };
        let y = target_features(&adapter, "l", &probes, None).unwrap();
        assert_eq!(y.matrix, DMatrix::identity(2, 2));
    }

    #[test]
    fn hand_worked_rank_one_targets() {
        // r=1, up=(1,2)^T, down=(3,4), alpha=1, X=(1,1)^T -> Y=(7,14)^T
        let mut adapter = LoraAdapter::new("h");
        adapter.insert(
            LoraLayer::new(
                "l",
                DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
                DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
                1.0,
                Dtype::F32,
            )
            .unwrap(),
        );
        let probes = ProbeSet {
            concept_id: "h".to_string(),
            layer_id: "l".to_string(),
            seed: 0,
            matrix: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        };
        let y = target_features(&adapter, "l", &probes, None).unwrap();
        assert_eq!(y.matrix, DMatrix::from_row_slice(2, 1, &[7.0, 14.0]));
    }

    #[test]
    fn predicted_features_scale_probes() {
        // delta = 2I, X column (1,3)^T -> (2,6)^T
        let delta = LayerDelta::new("l", DMatrix::identity(2, 2) * 2.0);
        let probes = ProbeSet {
            concept_id: "c".to_string(),
            layer_id: "l".to_string(),
            seed: 0,
            matrix: DMatrix::from_row_slice(2, 1, &[1.0, 3.0]),
        };
        let y = predict_features(&delta, &probes, None).unwrap();
        assert_eq!(y.matrix, DMatrix::from_row_slice(2, 1, &[2.0, 6.0]));
    }

    #[test]
    fn prediction_with_own_delta_matches_targets() {
        let mut adapter = LoraAdapter::new("c");
        let up = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.25, 2.0, 0.0, 1.0]);
        let down = DMatrix::from_row_slice(2, 4, &[0.1, 0.2, 0.3, 0.4, -0.4, 0.3, -0.2, 0.1]);
        adapter.insert(LoraLayer::new("l", up, down, 2.0, Dtype::F32).unwrap());
        let probes = sample_probes("c", "l", 4, 6, 9);
        let y = target_features(&adapter, "l", &probes, None).unwrap();
        let delta = LayerDelta::new("l", adapter.effective_delta("l").unwrap());
        let y_hat = predict_features(&delta, &probes, None).unwrap();
        assert_eq!(y.matrix, y_hat.matrix);
    }

    #[test]
    fn full_mode_cancels_base_in_residuals() {
        let mut rng = crate::rng::keyed_rng(3, "mode-test", &[]);
        let w = gaussian_matrix(&mut rng, 3, 4);
        let mut base = BaseWeights::default();
        base.layers.insert("l".to_string(), w);

        let mut adapter = LoraAdapter::new("c");
        adapter.insert(
            LoraLayer::new(
                "l",
                gaussian_matrix(&mut rng, 3, 2),
                gaussian_matrix(&mut rng, 2, 4),
                2.0,
                Dtype::F32,
            )
            .unwrap(),
        );
        let delta = LayerDelta::new("l", gaussian_matrix(&mut rng, 3, 4));
        let probes = sample_probes("c", "l", 4, 5, 7);

        let y = target_features(&adapter, "l", &probes, Some(&base)).unwrap();
        let y_hat = predict_features(&delta, &probes, Some(&base)).unwrap();
        let residual = &y.matrix - &y_hat.matrix;
        let expected = (adapter.effective_delta("l").unwrap() - &delta.matrix) * &probes.matrix;
        assert!((residual - expected).norm() < 1e-9);
    }

    #[test]
    fn unknown_layer_is_reported() {
        let adapter = identity_adapter(2);
        let probes = sample_probes("id", "nope", 2, 3, 0);
        let err = target_features(&adapter, "nope", &probes, None).unwrap_err();
        assert!(matches!(err, MergeError::UnknownLayer(_)));
    }

    #[test]
    fn probe_shape_mismatch_is_reported() {
        let adapter = identity_adapter(2);
        let probes = sample_probes("id", "l", 3, 3, 0);
        let err = target_features(&adapter, "l", &probes, None).unwrap_err();
        assert!(matches!(err, MergeError::ShapeMismatch(_)));
    }
}
