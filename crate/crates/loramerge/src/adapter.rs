//! Adapter and merged-delta file handling on top of the tensor container.
//!
//! Naming convention inside a container file:
//! - `{layer}.lora_up.weight`   (d_out x r)
//! - `{layer}.lora_down.weight` (r x d_in)
//! - `{layer}.alpha`            optional scalar, defaults to r
//! - `{layer}.delta.weight`     dense merged delta (d_out x d_in)
//! - `{layer}.weight`           base weights (d_out x d_in)
//!
//! The effective update a layer contributes is `(alpha / r) * up * down`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;

use crate::container::{
    read_tensor_file, write_tensor_file, Dtype, TensorFile, TensorRecord,
};
use crate::error::{MergeError, Result};
use crate::merge::LayerDelta;

pub const UP_SUFFIX: &str = ".lora_up.weight";
pub const DOWN_SUFFIX: &str = ".lora_down.weight";
pub const ALPHA_SUFFIX: &str = ".alpha";
pub const DELTA_SUFFIX: &str = ".delta.weight";
pub const BASE_SUFFIX: &str = ".weight";

/// One low-rank layer update: `up` is d_out x r, `down` is r x d_in.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub layer_id: String,
    pub up: DMatrix<f64>,
    pub down: DMatrix<f64>,
    pub alpha: f64,
    /// Storage precision used when this layer is written back to disk.
    pub dtype: Dtype,
}

impl LoraLayer {
    pub fn new(
        layer_id: impl Into<String>,
        up: DMatrix<f64>,
        down: DMatrix<f64>,
        alpha: f64,
        dtype: Dtype,
    ) -> Result<Self> {
        let layer_id = layer_id.into();
        let (d_out, r_up) = (up.nrows(), up.ncols());
        let (r_down, d_in) = (down.nrows(), down.ncols());
        if d_out == 0 || d_in == 0 || r_up == 0 {
            return Err(MergeError::ShapeMismatch(format!(
                "layer {layer_id}: empty dimension (up {d_out}x{r_up}, down {r_down}x{d_in})"
            )));
        }
        if r_up != r_down {
            return Err(MergeError::ShapeMismatch(format!(
                "layer {layer_id}: up is {d_out}x{r_up} but down is {r_down}x{d_in} (rank disagreement)"
            )));
        }
        if r_up > d_out.min(d_in) {
            return Err(MergeError::ShapeMismatch(format!(
                "layer {layer_id}: rank {r_up} exceeds min({d_out}, {d_in})"
            )));
        }
        if !alpha.is_finite() {
            return Err(MergeError::NonFinite(format!(
                "layer {layer_id}: alpha is not finite"
            )));
        }
        if alpha <= 0.0 {
            return Err(MergeError::ShapeMismatch(format!(
                "layer {layer_id}: alpha must be positive, got {alpha}"
            )));
        }
        ensure_finite(&format!("{layer_id}{UP_SUFFIX}"), &up)?;
        ensure_finite(&format!("{layer_id}{DOWN_SUFFIX}"), &down)?;
        Ok(Self {
            layer_id,
            up,
            down,
            alpha,
            dtype,
        })
    }

    pub fn rank(&self) -> usize {
        self.up.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.up.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.down.ncols()
    }

    /// `(alpha / r) * up * down`, the full-shape update this layer contributes.
    pub fn effective_delta(&self) -> DMatrix<f64> {
        (&self.up * &self.down) * (self.alpha / self.rank() as f64)
    }
}

/// A named adapter: one low-rank update per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub concept_id: String,
    pub layers: BTreeMap<String, LoraLayer>,
}

impl LoraAdapter {
    pub fn new(concept_id: impl Into<String>) -> Self {
        Self {
            concept_id: concept_id.into(),
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: LoraLayer) {
        self.layers.insert(layer.layer_id.clone(), layer);
    }

    pub fn effective_delta(&self, layer_id: &str) -> Option<DMatrix<f64>> {
        self.layers.get(layer_id).map(LoraLayer::effective_delta)
    }
}

/// Frozen base weights, needed only in full mode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaseWeights {
    pub layers: BTreeMap<String, DMatrix<f64>>,
}

/// A layer every adapter agrees on, with its common shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PlannedLayer {
    pub layer_id: String,
    pub d_out: usize,
    pub d_in: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SkippedLayer {
    pub layer_id: String,
    pub reason: String,
}

/// Output of [`validate_compatibility`]: the layers a merge will run on and
/// the ones it had to drop.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MergePlan {
    pub layers: Vec<PlannedLayer>,
    pub skipped: Vec<SkippedLayer>,
}

pub(crate) fn ensure_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MergeError::NonFinite(format!(
            "tensor {name} contains NaN or Inf"
        )))
    }
}

pub(crate) fn matrix_from_record(rec: &TensorRecord) -> Result<DMatrix<f64>> {
    if rec.shape.len() != 2 {
        return Err(MergeError::ShapeMismatch(format!(
            "tensor {} has shape {:?}, expected a matrix",
            rec.name, rec.shape
        )));
    }
    let (rows, cols) = (rec.shape[0], rec.shape[1]);
    Ok(DMatrix::from_fn(rows, cols, |i, j| {
        rec.data[i * cols + j] as f64
    }))
}

pub(crate) fn record_from_matrix(name: &str, dtype: Dtype, m: &DMatrix<f64>) -> TensorRecord {
    let (rows, cols) = m.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(m[(i, j)] as f32);
        }
    }
    TensorRecord::new(name, dtype, vec![rows, cols], data)
}

fn scalar_from_record(rec: &TensorRecord) -> Result<f64> {
    if rec.element_count() != 1 {
        return Err(MergeError::ShapeMismatch(format!(
            "tensor {} has shape {:?}, expected a scalar",
            rec.name, rec.shape
        )));
    }
    Ok(rec.data[0] as f64)
}

fn concept_id_for(file: &TensorFile, path: &Path) -> String {
    if let Some(id) = file.metadata.get("concept_id") {
        return id.clone();
    }
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "adapter".to_string())
}

/// Load an adapter. f16 tensors are widened to f32 precision; alpha defaults
/// to the layer rank when absent. Tensors that do not follow the naming
/// convention are ignored.
pub fn load_adapter(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    let path = path.as_ref();
    let file = read_tensor_file(path)?;
    adapter_from_file(&file, concept_id_for(&file, path))
}

pub fn adapter_from_file(file: &TensorFile, concept_id: String) -> Result<LoraAdapter> {
    let mut ups: BTreeMap<String, &TensorRecord> = BTreeMap::new();
    let mut downs: BTreeMap<String, &TensorRecord> = BTreeMap::new();
    let mut alphas: BTreeMap<String, &TensorRecord> = BTreeMap::new();
    for (name, rec) in &file.tensors {
        if let Some(layer) = name.strip_suffix(UP_SUFFIX) {
            ups.insert(layer.to_string(), rec);
        } else if let Some(layer) = name.strip_suffix(DOWN_SUFFIX) {
            downs.insert(layer.to_string(), rec);
        } else if let Some(layer) = name.strip_suffix(ALPHA_SUFFIX) {
            alphas.insert(layer.to_string(), rec);
        }
    }

    for layer in downs.keys() {
        if !ups.contains_key(layer) {
            return Err(MergeError::OrphanTensor(format!(
                "{layer}{DOWN_SUFFIX} has no matching up tensor"
            )));
        }
    }
    for layer in alphas.keys() {
        if !ups.contains_key(layer) {
            return Err(MergeError::OrphanTensor(format!(
                "{layer}{ALPHA_SUFFIX} has no matching up/down pair"
            )));
        }
    }

    let mut adapter = LoraAdapter::new(concept_id);
    for (layer, up_rec) in ups {
        let down_rec = downs.remove(&layer).ok_or_else(|| {
            MergeError::OrphanTensor(format!("{layer}{UP_SUFFIX} has no matching down tensor"))
        })?;
        let up = matrix_from_record(up_rec)?;
        let down = matrix_from_record(down_rec)?;
        let alpha = match alphas.get(&layer) {
            Some(rec) => scalar_from_record(rec)?,
            None => up.ncols() as f64,
        };
        let dtype = if up_rec.dtype == Dtype::F16 && down_rec.dtype == Dtype::F16 {
            Dtype::F16
        } else {
            Dtype::F32
        };
        adapter.insert(LoraLayer::new(layer, up, down, alpha, dtype)?);
    }
    if adapter.layers.is_empty() {
        return Err(MergeError::OrphanTensor(
            "file contains no lora_up/lora_down pairs".to_string(),
        ));
    }
    Ok(adapter)
}

pub fn save_adapter(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    let mut file = TensorFile::new();
    file.metadata
        .insert("concept_id".to_string(), adapter.concept_id.clone());
    for (layer_id, layer) in &adapter.layers {
        file.insert(record_from_matrix(
            &format!("{layer_id}{UP_SUFFIX}"),
            layer.dtype,
            &layer.up,
        ));
        file.insert(record_from_matrix(
            &format!("{layer_id}{DOWN_SUFFIX}"),
            layer.dtype,
            &layer.down,
        ));
        file.insert(TensorRecord::new(
            format!("{layer_id}{ALPHA_SUFFIX}"),
            Dtype::F32,
            vec![1],
            vec![layer.alpha as f32],
        ));
    }
    write_tensor_file(path, &file)
}

/// Load base weights from tensors named `{layer}.weight`.
pub fn load_base(path: impl AsRef<Path>) -> Result<BaseWeights> {
    let file = read_tensor_file(path)?;
    let mut base = BaseWeights::default();
    for (name, rec) in &file.tensors {
        if name.ends_with(UP_SUFFIX) || name.ends_with(DOWN_SUFFIX) || name.ends_with(DELTA_SUFFIX)
        {
            continue;
        }
        if let Some(layer) = name.strip_suffix(BASE_SUFFIX) {
            let m = matrix_from_record(rec)?;
            ensure_finite(name, &m)?;
            base.layers.insert(layer.to_string(), m);
        }
    }
    if base.layers.is_empty() {
        return Err(MergeError::OrphanTensor(format!(
            "no `{BASE_SUFFIX}` tensors in base file"
        )));
    }
    Ok(base)
}

pub fn save_base(base: &BaseWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut file = TensorFile::new();
    for (layer_id, m) in &base.layers {
        file.insert(record_from_matrix(
            &format!("{layer_id}{BASE_SUFFIX}"),
            Dtype::F32,
            m,
        ));
    }
    write_tensor_file(path, &file)
}

/// Intersect the layers of all adapters. A layer makes the plan only if it is
/// present everywhere with one consistent shape; everything else is reported
/// as skipped. With a base given, every planned layer must exist there with
/// the same shape.
pub fn validate_compatibility(
    adapters: &[LoraAdapter],
    base: Option<&BaseWeights>,
) -> Result<MergePlan> {
    if adapters.is_empty() {
        return Err(MergeError::InvalidConfig(
            "at least one adapter is required".to_string(),
        ));
    }
    let mut all_ids = BTreeSet::new();
    for adapter in adapters {
        all_ids.extend(adapter.layers.keys().cloned());
    }

    let mut plan = MergePlan {
        layers: Vec::new(),
        skipped: Vec::new(),
    };
    'layers: for layer_id in all_ids {
        let mut shape: Option<(usize, usize)> = None;
        for adapter in adapters {
            match adapter.layers.get(&layer_id) {
                None => {
                    plan.skipped.push(SkippedLayer {
                        layer_id,
                        reason: format!("missing from adapter {}", adapter.concept_id),
                    });
                    continue 'layers;
                }
                Some(layer) => {
                    let this = (layer.d_out(), layer.d_in());
                    match shape {
                        None => shape = Some(this),
                        Some(expected) if expected != this => {
                            plan.skipped.push(SkippedLayer {
                                layer_id,
                                reason: format!(
                                    "incompatible shapes: {}x{} vs {}x{} (adapter {})",
                                    expected.0, expected.1, this.0, this.1, adapter.concept_id
                                ),
                            });
                            continue 'layers;
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        let (d_out, d_in) = shape.expect("adapters is non-empty");
        plan.layers.push(PlannedLayer {
            layer_id,
            d_out,
            d_in,
        });
    }

    if plan.layers.is_empty() {
        return Err(MergeError::EmptyIntersection);
    }

    if let Some(base) = base {
        for planned in &plan.layers {
            match base.layers.get(&planned.layer_id) {
                None => return Err(MergeError::BaseMissingLayer(planned.layer_id.clone())),
                Some(w) => {
                    if w.shape() != (planned.d_out, planned.d_in) {
                        return Err(MergeError::ShapeMismatch(format!(
                            "base layer {} is {}x{}, adapters expect {}x{}",
                            planned.layer_id,
                            w.nrows(),
                            w.ncols(),
                            planned.d_out,
                            planned.d_in
                        )));
                    }
                }
            }
        }
    }

    Ok(plan)
}

/// Write merged deltas. Without `export_rank` each layer is stored dense as
/// `{layer}.delta.weight`; with `export_rank = k` each layer is factored by
/// truncated SVD into a rank-k adapter (`up = U_k * S_k`, `down = V_k^T`,
/// alpha = k) so the effective delta is exactly `up * down`.
pub fn save_merged(
    deltas: &BTreeMap<String, LayerDelta>,
    path: impl AsRef<Path>,
    export_rank: Option<usize>,
) -> Result<()> {
    if deltas.is_empty() {
        return Err(MergeError::InvalidConfig("no deltas to save".to_string()));
    }
    for (layer_id, delta) in deltas {
        ensure_finite(&format!("{layer_id}{DELTA_SUFFIX}"), &delta.matrix)?;
    }
    let mut file = TensorFile::new();
    match export_rank {
        None => {
            for (layer_id, delta) in deltas {
                file.insert(record_from_matrix(
                    &format!("{layer_id}{DELTA_SUFFIX}"),
                    Dtype::F32,
                    &delta.matrix,
                ));
            }
        }
        Some(k) => {
            for (layer_id, delta) in deltas {
                let (up, down) = truncated_factors(layer_id, &delta.matrix, k)?;
                file.insert(record_from_matrix(
                    &format!("{layer_id}{UP_SUFFIX}"),
                    Dtype::F32,
                    &up,
                ));
                file.insert(record_from_matrix(
                    &format!("{layer_id}{DOWN_SUFFIX}"),
                    Dtype::F32,
                    &down,
                ));
                file.insert(TensorRecord::new(
                    format!("{layer_id}{ALPHA_SUFFIX}"),
                    Dtype::F32,
                    vec![1],
                    vec![k as f32],
                ));
            }
        }
    }
    write_tensor_file(path, &file)
}

/// Best rank-k factorization of a dense matrix: `up * down` minimizes the
/// Frobenius error over all rank-k products.
pub fn truncated_factors(
    layer_id: &str,
    matrix: &DMatrix<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (rows, cols) = matrix.shape();
    if k == 0 || k > rows.min(cols) {
        return Err(MergeError::RankTooLarge {
            layer: layer_id.to_string(),
            requested: k,
            rows,
            cols,
        });
    }
    let svd = matrix.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut up = u.columns(0, k).into_owned();
    for j in 0..k {
        let mut col = up.column_mut(j);
        col *= svd.singular_values[j];
    }
    let down = v_t.rows(0, k).into_owned();
    Ok((up, down))
}

/// Load dense merged deltas (`{layer}.delta.weight`).
pub fn load_merged(path: impl AsRef<Path>) -> Result<BTreeMap<String, LayerDelta>> {
    let file = read_tensor_file(path)?;
    let mut deltas = BTreeMap::new();
    for (name, rec) in &file.tensors {
        if let Some(layer) = name.strip_suffix(DELTA_SUFFIX) {
            let m = matrix_from_record(rec)?;
            ensure_finite(name, &m)?;
            deltas.insert(layer.to_string(), LayerDelta::new(layer, m));
        }
    }
    if deltas.is_empty() {
        return Err(MergeError::OrphanTensor(format!(
            "no `{DELTA_SUFFIX}` tensors in merged file"
        )));
    }
    Ok(deltas)
}
