//! Run configuration, read from TOML.
//!
//! ```toml
//! name = "armt-rewrite"
//! seed = 0
//! output_dir = "runs/armt-rewrite"   # relative paths resolve against $ARMT_OUTPUT_ROOT
//!
//! [model]                            # see ModelConfig; unspecified fields take defaults
//! variant = "armt"
//!
//! [task]
//! kind = "rewrite"
//! key_len = 1
//! value_len = 1
//!
//! [train]
//! batch_size = 64
//! lr = 1e-4
//! warmup_steps = 1000
//! eval_every = 500
//! val_samples = 1024
//! threshold = 0.95
//! precision = "f32"
//! stages = [{ n_pairs = 1, steps = 2000, sampling = "uniform_up_to" }]
//!
//! [eval]
//! grid = [1, 2, 5, 10, 20, 50]
//! samples = 256
//! seeds = [0, 1, 2]
//! ```

use std::path::{Path, PathBuf};

use armt_core::{AdamConfig, ModelConfig, Precision, TaskKind, TaskSpec, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ARMT_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleLengths {
    /// Every batch has exactly `n_pairs` pairs.
    Fixed,
    /// Each batch draws its pair count uniformly from `1..=n_pairs`.
    UniformUpTo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub n_pairs: usize,
    /// Optimizer-step budget for the stage.
    pub steps: u64,
    #[serde(default = "defaults::sampling")]
    pub sampling: SampleLengths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stages: Vec<CurriculumStage>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: u64,
    #[serde(default = "defaults::val_samples")]
    pub val_samples: usize,
    /// Validation exact match that ends a stage early.
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    #[serde(default = "defaults::precision")]
    pub precision: Precision,
    /// Detach the carry every this many segments; unlimited when absent.
    #[serde(default)]
    pub bptt_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "defaults::grid")]
    pub grid: Vec<usize>,
    #[serde(default = "defaults::eval_samples")]
    pub samples: usize,
    #[serde(default = "defaults::eval_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::eval_batch")]
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: defaults::grid(),
            samples: defaults::eval_samples(),
            seeds: defaults::eval_seeds(),
            batch_size: defaults::eval_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

mod defaults {
    use super::*;

    pub fn sampling() -> SampleLengths {
        SampleLengths::UniformUpTo
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn warmup_steps() -> u64 {
        1000
    }
    pub fn eval_every() -> u64 {
        500
    }
    pub fn val_samples() -> usize {
        1024
    }
    pub fn threshold() -> f64 {
        0.95
    }
    pub fn precision() -> Precision {
        Precision::F32
    }
    pub fn grid() -> Vec<usize> {
        vec![1, 2, 5, 10, 20, 50]
    }
    pub fn eval_samples() -> usize {
        256
    }
    pub fn eval_seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }
    pub fn eval_batch() -> usize {
        64
    }
}

/// Remember curriculum: 1, 2, 3, 5, 10, 20, 40, 50, 200 pairs.
pub fn remember_schedule(steps_per_stage: u64) -> Vec<CurriculumStage> {
    schedule(&[1, 2, 3, 5, 10, 20, 40, 50, 200], steps_per_stage)
}

/// Rewrite curriculum ending at 50 pairs.
pub fn rewrite_schedule(steps_per_stage: u64) -> Vec<CurriculumStage> {
    schedule(&[1, 2, 3, 5, 10, 20, 40, 50], steps_per_stage)
}

pub fn schedule(pairs: &[usize], steps_per_stage: u64) -> Vec<CurriculumStage> {
    pairs
        .iter()
        .map(|&n_pairs| CurriculumStage {
            n_pairs,
            steps: steps_per_stage,
            sampling: SampleLengths::UniformUpTo,
        })
        .collect()
}

impl TrainConfig {
    pub fn new(stages: Vec<CurriculumStage>) -> Self {
        Self {
            stages,
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            warmup_steps: defaults::warmup_steps(),
            adam: AdamConfig::default(),
            eval_every: defaults::eval_every(),
            val_samples: defaults::val_samples(),
            threshold: defaults::threshold(),
            precision: defaults::precision(),
            bptt_window: None,
        }
    }

    /// Learning rate after `step` optimizer steps: linear warmup, then flat.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

impl RunConfig {
    /// Defaults for `variant` on `task`, with the task's default curriculum.
    pub fn new(name: impl Into<String>, variant: Variant, task: TaskSpec, steps_per_stage: u64) -> Self {
        let stages = match task.kind {
            TaskKind::Remember => remember_schedule(steps_per_stage),
            TaskKind::Rewrite => rewrite_schedule(steps_per_stage),
        };
        let name = name.into();
        Self {
            output_dir: PathBuf::from("runs").join(&name),
            name,
            seed: 0,
            model: ModelConfig::new(variant),
            task,
            train: TrainConfig::new(stages),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(LabError::Config(format!("`{field}`: {why}")));
        self.model.validate().map_err(|e| LabError::Config(format!("`model`: {e}")))?;
        if self.task.key_len == 0 || self.task.value_len == 0 {
            return bad("task", "key_len and value_len must be positive".into());
        }
        let need = self.task.max_segment_len();
        if need > self.model.segment_len {
            return bad(
                "model.segment_len",
                format!("{} is shorter than the task's {need}-token segments", self.model.segment_len),
            );
        }
        let t = &self.train;
        if t.stages.is_empty() {
            return bad("train.stages", "at least one stage is required".into());
        }
        for (i, w) in t.stages.windows(2).enumerate() {
            if w[1].n_pairs < w[0].n_pairs {
                return bad(
                    &format!("train.stages[{}].n_pairs", i + 1),
                    "stages must be nondecreasing in n_pairs".into(),
                );
            }
        }
        for (i, s) in t.stages.iter().enumerate() {
            if s.n_pairs == 0 {
                return bad(&format!("train.stages[{i}].n_pairs"), "must be positive".into());
            }
            if s.n_pairs + 1 > self.model.max_segments {
                return bad(&format!("train.stages[{i}].n_pairs"), "exceeds model.max_segments".into());
            }
            if let Some(max) = self.task.max_pairs() {
                if s.n_pairs as u64 > max {
                    return bad(&format!("train.stages[{i}].n_pairs"), format!("exceeds the {max}-key keyspace"));
                }
            }
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("train.lr", "must be positive".into());
        }
        if t.eval_every == 0 {
            return bad("train.eval_every", "must be positive".into());
        }
        if t.val_samples == 0 {
            return bad("train.val_samples", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.threshold) {
            return bad("train.threshold", "must lie in [0, 1]".into());
        }
        if self.eval.samples == 0 || self.eval.batch_size == 0 {
            return bad("eval", "samples and batch_size must be positive".into());
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds", "at least one seed is required".into());
        }
        if self.eval.grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("eval.grid", "must be strictly ascending".into());
        }
        Ok(())
    }

    /// Output directory, resolved against `$ARMT_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    pub fn final_train_pairs(&self) -> usize {
        self.train.stages.last().map_or(0, |s| s.n_pairs)
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
