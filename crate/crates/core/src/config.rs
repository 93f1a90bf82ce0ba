//! Run configuration. Every field is required in the file: there are no
//! defaults in code, so a preset file is a complete record of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encode::DegreeMode;
use crate::error::{GrassError, Result};
use crate::nn::{Activation, NormKind};
use crate::rewire::RewireConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    GraphRegression,
    GraphClassification,
    NodeClassification,
}

impl Task {
    pub fn is_graph_level(self) -> bool {
        !matches!(self, Task::NodeClassification)
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, Task::GraphRegression)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub layers: usize,
    pub dim: usize,
    /// Hidden width of the graph-level head; 0 means a linear head.
    pub head_hidden: usize,
    /// Regression targets per graph, or number of classes.
    pub out_dim: usize,
    pub node_features: usize,
    pub edge_features: usize,
    pub activation: Activation,
    pub attention_eps: f64,
    pub logit_clamp: f64,
    pub log_length_scaling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeConfig {
    pub degree_mode: DegreeMode,
    /// Degree table extent; larger degrees are clamped.
    pub max_out_degree: usize,
    pub max_in_degree: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrwpConfig {
    pub enabled: bool,
    /// Walk length.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropKeyConfig {
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeFlipConfig {
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub kind: NormKind,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub kind: PoolKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrassConfig {
    pub model: ModelConfig,
    pub encode: EncodeConfig,
    pub rrwp: RrwpConfig,
    pub rewire: RewireConfig,
    pub dropkey: DropKeyConfig,
    pub edge_flip: EdgeFlipConfig,
    pub norm: NormConfig,
    pub pool: PoolConfig,
    pub train: TrainConfig,
}

fn bad(msg: impl Into<String>) -> GrassError {
    GrassError::Config(msg.into())
}

impl GrassConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: GrassConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GrassError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            GrassError::Config(m) => bad(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.layers == 0 {
            return Err(bad("model.layers must be at least 1"));
        }
        if m.dim == 0 {
            return Err(bad("model.dim must be positive"));
        }
        if m.out_dim == 0 {
            return Err(bad("model.out_dim must be positive"));
        }
        if m.task.is_classification() && m.out_dim < 2 {
            return Err(bad("classification needs model.out_dim >= 2 classes"));
        }
        if !(m.attention_eps >= 0.0 && m.logit_clamp.is_finite()) {
            return Err(bad("model.attention_eps must be >= 0 and model.logit_clamp finite"));
        }
        if self.rrwp.enabled && self.rrwp.k == 0 {
            return Err(bad("rrwp.k must be at least 1"));
        }
        self.rewire.validate().map_err(|e| bad(e.to_string()))?;
        if !(0.0..1.0).contains(&self.dropkey.rate) {
            return Err(bad("dropkey.rate must lie in [0, 1)"));
        }
        for (name, v) in [
            ("norm.eps", self.norm.eps),
            ("encode.bn_eps", self.encode.bn_eps),
        ] {
            if !(v > 0.0) {
                return Err(bad(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("norm.momentum", self.norm.momentum),
            ("encode.bn_momentum", self.encode.bn_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(format!("{name} must lie in [0, 1]")));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(bad("train.batch_size must be positive"));
        }
        if !(t.warmup_ratio > 0.0 && t.warmup_ratio < 1.0) {
            return Err(bad("train.warmup_ratio must lie in (0, 1)"));
        }
        if !(t.lr_init > 0.0 && t.lr_peak > 0.0 && t.lr_final > 0.0) {
            return Err(bad("learning rates must be positive"));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return Err(bad("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(bad("train.weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return Err(bad("train.label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A small complete configuration for tests.
#[cfg(test)]
pub(crate) const TEST_CONFIG: &str = r#"
[model]
task = "graph-regression"
layers = 2
dim = 8
head_hidden = 16
out_dim = 1
node_features = 3
edge_features = 2
activation = "silu"
attention_eps = 1e-5
logit_clamp = 40.0
log_length_scaling = false

[encode]
degree_mode = "auto"
max_out_degree = 4
max_in_degree = 4
bn_eps = 1e-5
bn_momentum = 0.1

[rrwp]
enabled = true
k = 4

[rewire]
r = 2
retry_until_simple = false

[dropkey]
rate = 0.1

[edge_flip]
enabled = true

[norm]
kind = "pnv"
eps = 1e-5
momentum = 0.1

[pool]
kind = "sum"

[train]
epochs = 3
batch_size = 4
warmup_ratio = 0.1
lr_init = 1e-7
lr_peak = 5e-4
lr_final = 1e-7
beta1 = 0.95
beta2 = 0.98
weight_decay = 0.3
label_smoothing = 0.0
"#;

#[cfg(test)]
mod tests {
    use super::*;


    #[test]
    fn parses_and_roundtrips() {
        let cfg = GrassConfig::from_toml_str(TEST_CONFIG).unwrap();
        assert_eq!(cfg.model.task, Task::GraphRegression);
        assert_eq!(GrassConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_missing_keys_rejected() {
        let extra = TEST_CONFIG.replace("[pool]\n", "[pool]\ncolour = 1\n");
        assert!(matches!(GrassConfig::from_toml_str(&extra), Err(GrassError::Config(_))));
        let missing = TEST_CONFIG.replace("kind = \"sum\"\n", "");
        assert!(GrassConfig::from_toml_str(&missing).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for (from, to) in [
            ("dim = 8", "dim = 0"),
            ("r = 2\n", "r = 3\n"),
            ("rate = 0.1", "rate = 1.0"),
            ("warmup_ratio = 0.1", "warmup_ratio = 0.0"),
        ] {
            let text = TEST_CONFIG.replace(from, to);
            assert!(GrassConfig::from_toml_str(&text).is_err(), "{to} accepted");
        }
    }
}
