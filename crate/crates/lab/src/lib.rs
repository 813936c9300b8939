//! Curriculum trainer, exact-match evaluator and experiment plumbing for
//! the associative retrieval tasks.

pub mod config;
pub mod error;
pub mod evaluator;
pub mod trainer;

pub use config::{CurriculumStage, EvalConfig, RunConfig, SampleLengths, TrainConfig};
pub use error::{LabError, Result};
pub use evaluator::{
    capacity_estimate, compare_ablation, exact_match, sweep, Capacity, Comparison, EvalPoint, SweepReport, SweepSpec,
};
pub use trainer::{advance_policy, train, Decision, StageReport, Trainer, TrainerState};
