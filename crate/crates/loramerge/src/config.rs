//! Merge configuration and defaults.

use serde::{Deserialize, Serialize};

use crate::error::{MergeError, Result};

/// Whether features are computed from the delta alone or on top of frozen
/// base weights. The same mode must be used for targets and predictions
/// within one merge run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    DeltaOnly,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain full-batch gradient descent (the default).
    Gd,
    /// Adaptive-moment updates; converges faster on desk-scale problems.
    Adam,
}

/// Steps the plateau detector looks back over.
pub const PLATEAU_WINDOW: usize = 50;

/// A merge aborts once the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    /// Hinge margin m for negative pairs.
    pub margin: f64,
    /// Weight of the delta-magnitude penalty.
    pub lambda_delta: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Probes per concept per layer; `None` uses 4 * d_in.
    pub probe_count: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    /// Guard for norm divisions near zero.
    pub epsilon: f64,
    /// Relative loss change over [`PLATEAU_WINDOW`] steps below which the
    /// optimizer stops early.
    pub plateau_tol: f64,
    pub optimizer: OptimizerKind,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            lambda_delta: 0.001,
            learning_rate: 1e-4,
            max_steps: 1000,
            probe_count: None,
            seed: 0,
            mode: Mode::DeltaOnly,
            epsilon: 1e-12,
            plateau_tol: 1e-9,
            optimizer: OptimizerKind::Gd,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(MergeError::InvalidConfig(format!(
                "margin must be a non-negative finite number, got {}",
                self.margin
            )));
        }
        if !(self.lambda_delta >= 0.0 && self.lambda_delta.is_finite()) {
            return Err(MergeError::InvalidConfig(format!(
                "lambda_delta must be a non-negative finite number, got {}",
                self.lambda_delta
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MergeError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps == 0 {
            return Err(MergeError::InvalidConfig(
                "max_steps must be at least 1".to_string(),
            ));
        }
        if self.probe_count == Some(0) {
            return Err(MergeError::InvalidConfig(
                "probe_count must be at least 1".to_string(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(MergeError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.plateau_tol >= 0.0 && self.plateau_tol.is_finite()) {
            return Err(MergeError::InvalidConfig(format!(
                "plateau_tol must be non-negative, got {}",
                self.plateau_tol
            )));
        }
        Ok(())
    }

    /// Probe count for a layer of the given input width.
    pub fn probes_for(&self, d_in: usize) -> usize {
        self.probe_count.unwrap_or(4 * d_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = MergeConfig::default();
        assert_eq!(c.margin, 0.5);
        assert_eq!(c.lambda_delta, 0.001);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.max_steps, 1000);
        assert_eq!(c.mode, Mode::DeltaOnly);
        assert_eq!(c.optimizer, OptimizerKind::Gd);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn negative_margin_is_invalid() {
        let c = MergeConfig {
            margin: -0.1,
            ..Default::default()
        };
        assert!(matches!(
            c.validate().unwrap_err(),
            MergeError::InvalidConfig(_)
        ));
    }

    #[test]
    fn probe_default_scales_with_input_width() {
        let c = MergeConfig::default();
        assert_eq!(c.probes_for(8), 32);
        let fixed = MergeConfig {
            probe_count: Some(10),
            ..Default::default()
        };
        assert_eq!(fixed.probes_for(8), 10);
    }

    #[test]
    fn config_serializes_with_snake_case_mode() {
        let json = serde_json::to_string(&MergeConfig::default()).unwrap();
        assert!(json.contains("\"mode\":\"delta_only\""));
        let back: MergeConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, MergeConfig::default());
    }
}
