//! Parameter sweeps over margin, penalty weight, and concept count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::MergeConfig;
use crate::error::{MergeError, Result};
use crate::merge::merge_adapters;
use crate::metrics::MergeReport;
use crate::rng::derive_seed;
use crate::synth::{synth_adapters, SyntheticSpec};

/// Grid axes. Defaults mirror the reference ablation: margins
/// {0.1, 0.25, 0.5, 1.0}, penalty weights {1e-4, 1e-3, 1e-2}, and concept
/// counts {2, 5, 8, 12}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub margins: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub concept_counts: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            margins: vec![0.1, 0.25, 0.5, 1.0],
            lambdas: vec![0.0001, 0.001, 0.01],
            concept_counts: vec![2, 5, 8, 12],
        }
    }
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.margins.len() * self.lambdas.len() * self.concept_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One evaluated grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_concepts: usize,
    pub margin: f64,
    pub lambda_delta: f64,
    pub seed: u64,
    pub report: MergeReport,
}

/// Evaluate the Cartesian product of the grid over synthetic suites derived
/// from `base_spec`. Each cell gets a fresh seed derived from the base seed
/// and its cell index, so rows are independent yet reproducible. Cells run
/// in parallel.
pub fn sweep(
    grid: &SweepGrid,
    base_spec: &SyntheticSpec,
    template: &MergeConfig,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(MergeError::InvalidConfig(
            "sweep grid has an empty axis".to_string(),
        ));
    }
    template.validate()?;

    struct Cell {
        n_concepts: usize,
        margin: f64,
        lambda_delta: f64,
        seed: u64,
    }

    let mut cells = Vec::with_capacity(grid.len());
    let mut index = 0u64;
    for &n_concepts in &grid.concept_counts {
        for &margin in &grid.margins {
            for &lambda_delta in &grid.lambdas {
                cells.push(Cell {
                    n_concepts,
                    margin,
                    lambda_delta,
                    seed: derive_seed(base_spec.seed, "sweep-cell", index),
                });
                index += 1;
            }
        }
    }

    cells
        .par_iter()
        .map(|cell| {
            let spec = SyntheticSpec {
                n_concepts: cell.n_concepts,
                seed: cell.seed,
                ..base_spec.clone()
            };
            let config = MergeConfig {
                margin: cell.margin,
                lambda_delta: cell.lambda_delta,
                seed: cell.seed,
                ..template.clone()
            };
            let probe_count = spec
                .layers
                .iter()
                .map(|l| config.probes_for(l.d_in))
                .max()
                .expect("spec has layers");
            let suite = synth_adapters(&spec, probe_count)?;
            let outcome = merge_adapters(&config, &suite.adapters, None, Some(&suite.probes))?;
            Ok(SweepRow {
                n_concepts: cell.n_concepts,
                margin: cell.margin,
                lambda_delta: cell.lambda_delta,
                seed: cell.seed,
                report: outcome.report,
            })
        })
        .collect()
}
