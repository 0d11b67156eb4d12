//! Run configuration: every knob of the training pipeline with its
//! benchmark default, loadable from flat TOML key-value files.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::ModelDims;
use crate::sdn::TauKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How the normalization factor is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauMode {
    /// Fixed normalized time `T_s / tau`.
    Fixed { ratio: f64 },
    /// Jointly trained with the network weights.
    Trainable,
    /// Estimated once from a best linear approximation of the training data.
    Bla,
}

impl std::fmt::Display for TauMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TauMode::Fixed { ratio } => write!(f, "fixed:{ratio}"),
            TauMode::Trainable => write!(f, "trainable"),
            TauMode::Bla => write!(f, "bla"),
        }
    }
}

impl std::str::FromStr for TauMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trainable" => Ok(TauMode::Trainable),
            "bla" => Ok(TauMode::Bla),
            other => {
                if let Some(v) = other.strip_prefix("fixed:") {
                    let ratio: f64 = v.parse().map_err(|_| {
                        ConfigError::Parse(format!("bad fixed ratio in tau mode {other:?}"))
                    })?;
                    if !(ratio > 0.0) || !ratio.is_finite() {
                        return Err(ConfigError::Invalid(format!(
                            "fixed tau ratio must be positive, got {ratio}"
                        )));
                    }
                    Ok(TauMode::Fixed { ratio })
                } else {
                    Err(ConfigError::Parse(format!(
                        "unknown tau mode {other:?}; expected fixed:<ratio>, trainable, or bla"
                    )))
                }
            }
        }
    }
}

impl Serialize for TauMode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TauMode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One stage of the piecewise-constant learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub step: usize,
    pub lr: f64,
}

/// Every hyperparameter of the pipeline. Defaults are the benchmark values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub state_dim: usize,
    /// Encoder output lags (n_a).
    pub output_lags: usize,
    /// Encoder input lags (n_b).
    pub input_lags: usize,
    pub hidden: usize,
    /// Subsequences per optimization step.
    pub batch_size: usize,
    /// Rollout length J of each training subsequence.
    pub subseq_len: usize,
    pub max_steps: usize,
    pub lr_schedule: Vec<LrStage>,
    /// Weight-decay coefficient applied inside the loss.
    pub weight_decay: f64,
    /// Barrier weight enforcing a negative-definite linear state matrix.
    pub stability_weight: f64,
    /// Weight of the auxiliary constraint-network penalty.
    pub aux_weight: f64,
    /// Optimizer steps without validation improvement before stopping.
    pub patience: usize,
    pub sample_time: f64,
    pub tau_mode: TauMode,
    pub tau_kind: TauKind,
    /// Initial normalized time T_s / tau for the trainable mode.
    pub tau_init_ratio: f64,
    pub seed: u64,
    /// Validation cadence in optimizer steps.
    pub val_interval: usize,
    /// RK4 substeps per sampling interval.
    pub substeps: usize,
    /// Whether the output network consumes the current input sample.
    pub output_feedthrough: bool,
    /// Rollout abort threshold on state magnitude.
    pub divergence_guard: f64,
    /// Model order used by the linear-approximation estimator.
    pub bla_order: usize,
    /// Regression lag used by the linear-approximation estimator.
    pub bla_lag: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            state_dim: 4,
            output_lags: 5,
            input_lags: 5,
            hidden: 64,
            batch_size: 64,
            subseq_len: 128,
            max_steps: 20_000,
            lr_schedule: vec![
                LrStage { step: 0, lr: 0.003 },
                LrStage { step: 1000, lr: 0.0009 },
                LrStage { step: 3000, lr: 0.00027 },
            ],
            weight_decay: 1e-8,
            stability_weight: 1e12,
            aux_weight: 1e3,
            patience: 2000,
            sample_time: 4.0,
            tau_mode: TauMode::Trainable,
            tau_kind: TauKind::PerState,
            tau_init_ratio: 0.1,
            seed: 0,
            val_interval: 50,
            substeps: 1,
            output_feedthrough: true,
            divergence_guard: 1e9,
            bla_order: 2,
            bla_lag: 10,
        }
    }
}

impl RunConfig {
    /// Learning rate in effect at an optimizer step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self
            .lr_schedule
            .first()
            .map(|s| s.lr)
            .unwrap_or(0.003);
        for stage in &self.lr_schedule {
            if stage.step <= step {
                lr = stage.lr;
            }
        }
        lr
    }

    /// Clamp floor for the normalization factor, tied to the sampling
    /// interval so the clamp stays meaningful across unit systems.
    pub fn tau_epsilon(&self) -> f64 {
        1e-6 * self.sample_time
    }

    pub fn dims(&self, input_dim: usize, output_dim: usize) -> ModelDims {
        ModelDims {
            state_dim: self.state_dim,
            input_dim,
            output_dim,
            output_lags: self.output_lags,
            input_lags: self.input_lags,
            hidden: self.hidden,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Content hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.state_dim == 0 || self.hidden == 0 {
            return Err(ConfigError::Invalid("dimensions must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch size must be at least 1".into()));
        }
        if self.subseq_len == 0 {
            return Err(ConfigError::Invalid("subsequence length must be positive".into()));
        }
        if !(self.sample_time > 0.0) {
            return Err(ConfigError::Invalid("sample time must be positive".into()));
        }
        if self.output_lags == 0 || self.input_lags == 0 {
            return Err(ConfigError::Invalid("lag orders must be positive".into()));
        }
        if !(self.tau_init_ratio > 0.0) {
            return Err(ConfigError::Invalid("tau_init_ratio must be positive".into()));
        }
        if self.val_interval == 0 {
            return Err(ConfigError::Invalid("val_interval must be positive".into()));
        }
        if self.bla_order == 0 {
            return Err(ConfigError::Invalid("bla_order must be at least 1".into()));
        }
        Ok(())
    }
}
