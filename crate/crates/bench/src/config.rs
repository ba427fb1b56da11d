//! Versioned JSON configuration for a full run. Missing fields take their
//! defaults; unknown fields are rejected with the offending path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tak_core::curvature::KfacOptions;
use tak_core::linearized::Regime;
use tak_core::regfactors::{MergeMode, RankSpec};
use tak_core::synthtasks::SuiteConfig;
use tak_core::training::{Optimizer, TrainConfig};

use crate::error::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySource {
    /// No penalty regardless of `beta`.
    None,
    /// One Kronecker pair per layer from the merged factors of the other tasks.
    Merged,
    /// Every other task's factors kept and summed separately.
    PerTask,
    /// Diagonal of the other tasks' curvature.
    Diagonal,
    /// Dense curvature of the other tasks (small networks only).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum Compression {
    None,
    Block { blocks: usize },
    Lowrank { rank: RankSpec },
    Prune { keep_ratio: f64 },
    Quant8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub beta: f64,
    pub source: PenaltySource,
    pub merge_mode: MergeMode,
    pub compression: Compression,
    pub apply_every: usize,
    /// Scale the penalty by `apply_every` on the steps where it applies.
    pub compensate: bool,
    pub last_layer_scale: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            beta: 3e-4,
            source: PenaltySource::Merged,
            merge_mode: MergeMode::InputWeighted,
            compression: Compression::None,
            apply_every: 1,
            compensate: false,
            last_layer_scale: 1.0,
        }
    }
}

impl PenaltyConfig {
    pub fn active(&self) -> bool {
        self.source != PenaltySource::None && self.beta > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// Use `fixed_alpha` only.
    Fixed,
    /// Pick the sweep value with the best mean accuracy on the training splits.
    GridBest,
    /// Report both.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        tak_core::taskvec::grid(self.start, self.end, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha_policy: AlphaPolicy,
    pub fixed_alpha: f64,
    pub sweep: Grid,
    /// Also score the composed model with the argmax over every class.
    pub joint: bool,
    pub disentangle: bool,
    /// Points per axis of the `[0, 1]²` grid.
    pub disentangle_points: usize,
    pub disentangle_tasks: [usize; 2],
    pub localize: bool,
    pub negate: bool,
    pub control_task: usize,
    pub negation_grid: Grid,
    /// Fraction of the control task's pre-trained accuracy that must survive negation.
    pub control_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha_policy: AlphaPolicy::Both,
            fixed_alpha: 1.0,
            sweep: Grid {
                start: 0.2,
                end: 1.6,
                step: 0.2,
            },
            joint: true,
            disentangle: true,
            disentangle_points: 11,
            disentangle_tasks: [0, 1],
            localize: true,
            negate: true,
            control_task: 0,
            negation_grid: Grid {
                start: -3.0,
                end: 0.0,
                step: 0.1,
            },
            control_fraction: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub suite: SuiteConfig,
    /// Width of both hidden layers.
    pub hidden: usize,
    pub pretrain: TrainConfig,
    pub kfac: KfacOptions,
    pub finetune: TrainConfig,
    pub penalty: PenaltyConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            suite: SuiteConfig::default(),
            hidden: 64,
            pretrain: TrainConfig {
                regime: Regime::Nonlinear,
                optimizer: Optimizer::adam(1e-2),
                epochs: 2,
                log_every: 50,
                ..TrainConfig::default()
            },
            kfac: KfacOptions::default(),
            finetune: TrainConfig {
                regime: Regime::Linearized,
                optimizer: Optimizer::adam(0.1),
                epochs: 60,
                log_every: 50,
                cache_anchor: true,
                ..TrainConfig::default()
            },
            penalty: PenaltyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn invalid(path: &str, message: impl Into<String>) -> BenchError {
    BenchError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| BenchError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| BenchError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(BenchError::Schema {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        self.suite.validate().map_err(|e| invalid("suite", e.to_string()))?;
        if self.hidden == 0 {
            return Err(invalid("hidden", "must be positive"));
        }
        let n_layers = 3;
        self.pretrain
            .validate(n_layers)
            .map_err(|e| invalid("pretrain", e.to_string()))?;
        self.finetune
            .validate(n_layers)
            .map_err(|e| invalid("finetune", e.to_string()))?;
        let p = &self.penalty;
        if !(p.beta.is_finite() && p.beta >= 0.0) {
            return Err(invalid("penalty.beta", "must be finite and non-negative"));
        }
        if p.apply_every == 0 {
            return Err(invalid("penalty.apply_every", "must be at least 1"));
        }
        if !(p.last_layer_scale.is_finite() && p.last_layer_scale > 0.0) {
            return Err(invalid("penalty.last_layer_scale", "must be positive"));
        }
        match p.compression {
            Compression::Block { blocks: 0 } => {
                return Err(invalid("penalty.compression.blocks", "must be at least 1"))
            }
            Compression::Prune { keep_ratio } if !(keep_ratio > 0.0 && keep_ratio <= 1.0) => {
                return Err(invalid("penalty.compression.keep_ratio", "must lie in (0, 1]"))
            }
            _ => {}
        }
        let e = &self.eval;
        let t = self.suite.n_tasks;
        if e.control_task >= t {
            return Err(invalid(
                "eval.control_task",
                format!("task {} out of range for {t} tasks", e.control_task),
            ));
        }
        if e.disentangle_tasks.iter().any(|&i| i >= t) || e.disentangle_tasks[0] == e.disentangle_tasks[1] {
            return Err(invalid(
                "eval.disentangle_tasks",
                "need two distinct tasks of the suite",
            ));
        }
        if e.disentangle && e.disentangle_points < 2 {
            return Err(invalid("eval.disentangle_points", "need at least 2 points per axis"));
        }
        if e.sweep.values().is_empty() {
            return Err(invalid("eval.sweep", "grid is empty"));
        }
        if e.negation_grid.values().is_empty() {
            return Err(invalid("eval.negation_grid", "grid is empty"));
        }
        if !(0.0..=1.0).contains(&e.control_fraction) {
            return Err(invalid("eval.control_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Command-line overrides; each `Some` replaces the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_tasks: Option<usize>,
    pub beta: Option<f64>,
    pub source: Option<PenaltySource>,
    pub merge_mode: Option<MergeMode>,
    pub apply_every: Option<usize>,
    pub block_compression: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub alpha_policy: Option<AlphaPolicy>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.suite.seed = seed;
            cfg.pretrain.seed = seed;
            cfg.finetune.seed = seed;
            cfg.kfac.sample_seed = seed;
            if let tak_core::curvature::KfacVariant::Mc { seed: s, .. } = &mut cfg.kfac.variant {
                *s = seed;
            }
        }
        if let Some(t) = self.n_tasks {
            cfg.suite.n_tasks = t;
        }
        if let Some(b) = self.beta {
            cfg.penalty.beta = b;
        }
        if let Some(s) = self.source {
            cfg.penalty.source = s;
        }
        if let Some(m) = self.merge_mode {
            cfg.penalty.merge_mode = m;
        }
        if let Some(n) = self.apply_every {
            cfg.penalty.apply_every = n;
        }
        if let Some(blocks) = self.block_compression {
            cfg.penalty.compression = Compression::Block { blocks };
        }
        if let Some(e) = self.epochs {
            cfg.finetune.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.finetune.optimizer = cfg.finetune.optimizer.with_lr(lr);
        }
        if let Some(p) = self.alpha_policy {
            cfg.eval.alpha_policy = p;
        }
        cfg.validate()
    }
}
