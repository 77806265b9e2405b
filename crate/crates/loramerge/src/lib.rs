//! Merge independently trained low-rank adapters into one additive delta per
//! layer.
//!
//! Each adapter contributes input/output feature pairs at every shared
//! layer; a dense per-layer delta is then learned by gradient descent
//! against a contrastive objective that pulls each concept's merged outputs
//! toward its own targets while pushing them at least a margin away from
//! other concepts' targets. The crate also ships weighted-average and sum
//! baselines, a synthetic benchmark suite with controllable concept overlap,
//! fidelity/retrieval metrics, parameter sweeps, and a bit-exact binary
//! tensor container for adapters, merged deltas, and probes.

pub mod adapter;
pub mod baselines;
pub mod config;
pub mod container;
pub mod error;
pub mod loss;
pub mod merge;
pub mod metrics;
pub mod probes;
pub mod rng;
pub mod sweep;
pub mod synth;

pub use adapter::{
    load_adapter, load_base, load_merged, save_adapter, save_base, save_merged,
    validate_compatibility, BaseWeights, LoraAdapter, LoraLayer, MergePlan, PlannedLayer,
    SkippedLayer,
};
pub use baselines::{sum_merge, weighted_average_merge};
pub use config::{MergeConfig, Mode, OptimizerKind};
pub use container::{read_tensor_file, write_tensor_file, Dtype, TensorFile, TensorRecord};
pub use error::{MergeError, Result};
pub use loss::{
    contrastive_loss, delta_penalty, loss_gradient, negative_distances, positive_distances,
    total_loss, ContrastiveTerms, LossBreakdown,
};
pub use merge::{merge_adapters, merge_layer, LayerDelta, MergeOutcome};
pub use metrics::{fidelity_metrics, MergeReport};
pub use probes::{
    load_probe_file, predict_features, sample_probes, target_features, FeatureSet, ProbeBank,
    ProbeSet,
};
pub use sweep::{sweep, SweepGrid, SweepRow};
pub use synth::{synth_adapters, LayerShape, SyntheticSpec, SyntheticSuite};
