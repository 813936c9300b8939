//! Curriculum training: stages of increasing pair count, each run until
//! validation exact match reaches the threshold or its step budget is spent.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use armt_core::tasks::{collate, render};
use armt_core::{
    adam_step, load_checkpoint_matching, save_checkpoint, AdamState, Graph, Model, Precision, Real, SegmentedSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CurriculumStage, RunConfig, SampleLengths};
use crate::error::{LabError, Result};
use crate::evaluator::{evaluate_seeds, validation_seed};

/// Curriculum position and data stream, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub stage: usize,
    pub steps_in_stage: u64,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub finished: bool,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub n_pairs: usize,
    pub steps: u64,
    pub val_em: Option<f64>,
    /// Advanced on an exhausted budget rather than on the threshold.
    pub warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub n_pairs: usize,
    /// Per-step training loss of this call.
    pub losses: Vec<f64>,
    /// Pair count of each step's batch.
    pub batch_pairs: Vec<usize>,
    pub val_em: Option<f64>,
    /// Steps spent in the stage so far, across calls.
    pub steps_used: u64,
    pub budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Advance { warning: bool },
    Repeat,
}

/// Advance once validation exact match reaches `threshold`, or when the
/// stage's budget is spent (flagged with a warning).
pub fn advance_policy(report: &StageReport, threshold: f64) -> Decision {
    if report.val_em.is_some_and(|em| em >= threshold) {
        Decision::Advance { warning: false }
    } else if report.steps_used >= report.budget {
        Decision::Advance { warning: true }
    } else {
        Decision::Repeat
    }
}

/// Pair count of the next batch.
pub fn sample_pair_count(rng: &mut ChaCha8Rng, stage: &CurriculumStage) -> usize {
    match stage.sampling {
        SampleLengths::Fixed => stage.n_pairs,
        SampleLengths::UniformUpTo => rng.gen_range(1..=stage.n_pairs),
    }
}

#[derive(Debug, Serialize)]
struct MetricEvent<'a> {
    event: &'a str,
    step: u64,
    stage: usize,
    n_pairs: usize,
    loss: Option<f64>,
    em: Option<f64>,
    lr: Option<f64>,
    wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    warning: Option<bool>,
}

pub struct Trainer<R: Real> {
    pub config: RunConfig,
    pub model: Model<R>,
    pub optimizer: AdamState<R>,
    pub state: TrainerState,
    out_dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    started: Instant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub final_checkpoint: Option<PathBuf>,
    pub stages: Vec<StageSummary>,
    pub global_step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    trainer: TrainerState,
    run: RunConfig,
}

impl<R: Real> Trainer<R> {
    /// Fresh model and optimizer. Artifacts go to the resolved output
    /// directory when `write_artifacts` is set.
    pub fn new(config: RunConfig, write_artifacts: bool) -> Result<Self> {
        config.validate()?;
        check_precision::<R>(&config)?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamState::new(model.params());
        let state = TrainerState {
            stage: 0,
            steps_in_stage: 0,
            global_step: 0,
            // separate stream from parameter init
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a),
            finished: false,
            stages: Vec::new(),
        };
        let mut t = Self {
            model,
            optimizer,
            state,
            out_dir: None,
            metrics: None,
            started: Instant::now(),
            config,
        };
        if write_artifacts {
            t.open_output(false)?;
        }
        Ok(t)
    }

    /// Continues from a trainer checkpoint written by [`Trainer::save`].
    pub fn resume(config: RunConfig, checkpoint: &Path, write_artifacts: bool) -> Result<Self> {
        config.validate()?;
        check_precision::<R>(&config)?;
        let ckpt = load_checkpoint_matching::<R>(checkpoint, &config.model)?;
        let extra: CheckpointExtra = serde_json::from_value(ckpt.extra)
            .map_err(|e| LabError::Config(format!("checkpoint lacks trainer state: {e}")))?;
        if extra.run.train.stages != config.train.stages {
            return Err(LabError::Config("`train.stages` differ from the checkpoint's run".into()));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| LabError::Config("checkpoint has no optimizer state".into()))?;
        let mut t = Self {
            model: ckpt.model,
            optimizer,
            state: extra.trainer,
            out_dir: None,
            metrics: None,
            started: Instant::now(),
            config,
        };
        if write_artifacts {
            t.open_output(true)?;
        }
        Ok(t)
    }

    fn open_output(&mut self, append: bool) -> Result<()> {
        let dir = self.config.resolved_output_dir();
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        let file = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(dir.join("metrics.jsonl"))?;
        self.metrics = Some(BufWriter::new(file));
        self.out_dir = Some(dir);
        Ok(())
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    fn log(&mut self, ev: MetricEvent) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, &ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn wall_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    /// Draws one training batch from the trainer's stream.
    pub fn next_batch(&mut self, stage: &CurriculumStage) -> Result<(usize, Vec<SegmentedSample>)> {
        let n = sample_pair_count(&mut self.state.rng, stage);
        let samples = (0..self.config.train.batch_size)
            .map(|_| {
                let seed = self.state.rng.gen::<u64>() >> 1;
                Ok(render(&self.config.task.generate(n, seed)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((n, samples))
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self, samples: &[SegmentedSample]) -> Result<f64> {
        let segs = collate(samples)?;
        let mut g = Graph::new();
        let out = self.model.forward_sequence(&mut g, &segs, self.config.train.bptt_window)?;
        let loss = out
            .loss
            .ok_or_else(|| LabError::Config("batch has no supervised positions".into()))?;
        let value = g.value(loss).item().to_f64();
        let grads = g.backward(loss)?;
        drop(out);
        let params = self.model.params_mut();
        params.zero_grad();
        g.accumulate_param_grads(&grads, params);
        let lr = self.config.train.lr_at(self.state.global_step);
        adam_step(params, &mut self.optimizer, &self.config.train.adam, lr)?;
        self.state.global_step += 1;
        Ok(value)
    }

    /// Validation exact match at `n_pairs` on the held-out seed range.
    pub fn validate(&self, n_pairs: usize) -> Result<f64> {
        evaluate_seeds(
            &self.model,
            self.config.task,
            n_pairs,
            (0..self.config.train.val_samples).map(validation_seed),
            self.config.eval.batch_size,
        )
    }

    /// Runs up to `steps` optimizer steps of stage `stage_idx`, then
    /// validates (unless no step ran).
    pub fn run_stage(&mut self, stage_idx: usize, steps: u64) -> Result<StageReport> {
        let stage = self
            .config
            .train
            .stages
            .get(stage_idx)
            .cloned()
            .ok_or_else(|| LabError::Config(format!("no stage {stage_idx}")))?;
        let mut report = StageReport {
            stage: stage_idx,
            n_pairs: stage.n_pairs,
            losses: Vec::with_capacity(steps as usize),
            batch_pairs: Vec::with_capacity(steps as usize),
            val_em: None,
            steps_used: self.state.steps_in_stage,
            budget: stage.steps,
        };
        for _ in 0..steps {
            let (n, samples) = self.next_batch(&stage)?;
            let loss = match self.step(&samples) {
                Ok(l) => l,
                Err(LabError::Core(armt_core::Error::NonFinite { context })) => {
                    return Err(self.diverged(&context));
                }
                Err(e) => return Err(e),
            };
            self.state.steps_in_stage += 1;
            report.losses.push(loss);
            report.batch_pairs.push(n);
            let ev = MetricEvent {
                event: "step",
                step: self.state.global_step,
                stage: stage_idx,
                n_pairs: n,
                loss: Some(loss),
                em: None,
                lr: Some(self.config.train.lr_at(self.state.global_step - 1)),
                wall_ms: self.wall_ms(),
                warning: None,
            };
            self.log(ev)?;
        }
        report.steps_used = self.state.steps_in_stage;
        if steps > 0 {
            let em = self.validate(stage.n_pairs)?;
            report.val_em = Some(em);
            let ev = MetricEvent {
                event: "eval",
                step: self.state.global_step,
                stage: stage_idx,
                n_pairs: stage.n_pairs,
                loss: None,
                em: Some(em),
                lr: None,
                wall_ms: self.wall_ms(),
                warning: None,
            };
            self.log(ev)?;
            log::info!(
                "step {} stage {stage_idx} ({} pairs): val em {em:.4}",
                self.state.global_step,
                stage.n_pairs
            );
        }
        Ok(report)
    }

    fn diverged(&mut self, context: &str) -> LabError {
        log::error!("non-finite value at step {}: {context}", self.state.global_step);
        let path = self
            .out_dir
            .clone()
            .unwrap_or_else(std::env::temp_dir)
            .join("checkpoints")
            .join("diverged-last-good.ckpt");
        match self.save(&path) {
            Ok(()) => LabError::Diverged {
                step: self.state.global_step,
                checkpoint: path,
            },
            Err(e) => e,
        }
    }

    /// Writes model, optimizer and trainer state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::to_value(CheckpointExtra {
            trainer: self.state.clone(),
            run: self.config.clone(),
        })?;
        save_checkpoint(path, &self.model, Some(&self.optimizer), None, &extra)?;
        Ok(())
    }

    /// Runs the remaining curriculum. Checkpoints are written after every
    /// validation (`latest.ckpt`), at stage boundaries and at the end.
    pub fn train(&mut self) -> Result<TrainOutcome> {
        let threshold = self.config.train.threshold;
        let eval_every = self.config.train.eval_every;
        while !self.state.finished {
            let idx = self.state.stage;
            let stage = self.config.train.stages[idx].clone();
            let remaining = stage.steps.saturating_sub(self.state.steps_in_stage);
            let report = self.run_stage(idx, remaining.min(eval_every))?;
            let decision = advance_policy(&report, threshold);
            if let Decision::Advance { warning } = decision {
                if warning {
                    log::warn!(
                        "stage {idx} ({} pairs) budget spent at em {:?}",
                        stage.n_pairs,
                        report.val_em
                    );
                }
                self.state.stages.push(StageSummary {
                    stage: idx,
                    n_pairs: stage.n_pairs,
                    steps: self.state.steps_in_stage,
                    val_em: report.val_em,
                    warning,
                });
                let ev = MetricEvent {
                    event: "advance",
                    step: self.state.global_step,
                    stage: idx,
                    n_pairs: stage.n_pairs,
                    loss: None,
                    em: report.val_em,
                    lr: None,
                    wall_ms: self.wall_ms(),
                    warning: Some(warning),
                };
                self.log(ev)?;
                self.state.stage += 1;
                self.state.steps_in_stage = 0;
                if self.state.stage == self.config.train.stages.len() {
                    self.state.stage -= 1;
                    self.state.finished = true;
                }
                if let Some(dir) = self.out_dir.clone() {
                    self.save(&dir.join("checkpoints").join(format!("stage-{idx:02}.ckpt")))?;
                }
            }
            if let Some(dir) = self.out_dir.clone() {
                self.save(&dir.join("checkpoints").join("latest.ckpt"))?;
            }
            if let Some(w) = &mut self.metrics {
                w.flush()?;
            }
        }
        let final_checkpoint = match self.out_dir.clone() {
            Some(dir) => {
                let p = dir.join("final.ckpt");
                self.save(&p)?;
                Some(p)
            }
            None => None,
        };
        Ok(TrainOutcome {
            final_checkpoint,
            stages: self.state.stages.clone(),
            global_step: self.state.global_step,
        })
    }
}

fn check_precision<R: Real>(config: &RunConfig) -> Result<()> {
    if config.train.precision != R::PRECISION {
        return Err(LabError::Config(format!(
            "`train.precision` is {:?} but the trainer runs at {:?}",
            config.train.precision,
            R::PRECISION
        )));
    }
    Ok(())
}

/// Trains `config` at its configured precision, writing artifacts, resuming
/// from `resume` when given.
pub fn train(config: RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    fn go<R: Real>(config: RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
        let mut t = match resume {
            Some(p) => Trainer::<R>::resume(config, p, true)?,
            None => Trainer::<R>::new(config, true)?,
        };
        t.train()
    }
    match config.train.precision {
        Precision::F32 => go::<f32>(config, resume),
        Precision::F64 => go::<f64>(config, resume),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::schedule;
    use armt_core::{ModelConfig, TaskSpec, Variant};

    fn report(val_em: Option<f64>, used: u64, budget: u64) -> StageReport {
        StageReport {
            stage: 0,
            n_pairs: 1,
            losses: vec![],
            batch_pairs: vec![],
            val_em,
            steps_used: used,
            budget,
        }
    }

    #[test]
    fn policy_boundaries() {
        assert_eq!(advance_policy(&report(Some(1.0), 10, 100), 0.95), Decision::Advance { warning: false });
        assert_eq!(advance_policy(&report(Some(0.5), 10, 100), 0.95), Decision::Repeat);
        assert_eq!(advance_policy(&report(Some(0.5), 100, 100), 0.95), Decision::Advance { warning: true });
        assert_eq!(advance_policy(&report(Some(0.95), 1, 100), 0.95), Decision::Advance { warning: false });
    }

    pub(crate) fn tiny(variant: Variant) -> RunConfig {
        let mut cfg = RunConfig::new("tiny", variant, TaskSpec::rewrite(), 2);
        cfg.model = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            mem_tokens: 2,
            d_mem: 4,
            d_val: 4,
            ..ModelConfig::new(variant)
        };
        cfg.train.stages = schedule(&[1, 3], 2);
        cfg.train.batch_size = 4;
        cfg.train.val_samples = 8;
        cfg.train.eval_every = 2;
        cfg.train.precision = Precision::F64;
        cfg
    }

    #[test]
    fn zero_step_stage_leaves_model_unchanged() {
        let mut t = Trainer::<f64>::new(tiny(Variant::Armt), false).unwrap();
        let before = t.model.params().clone();
        let r = t.run_stage(0, 0).unwrap();
        assert!(r.losses.is_empty());
        assert_eq!(r.val_em, None);
        for ((_, a), (_, b)) in before.iter().zip(t.model.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn precision_must_match() {
        assert!(Trainer::<f32>::new(tiny(Variant::Rmt), false).is_err());
    }

    #[test]
    fn fixed_sampling_uses_stage_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stage = CurriculumStage {
            n_pairs: 5,
            steps: 1,
            sampling: SampleLengths::Fixed,
        };
        assert!((0..100).all(|_| sample_pair_count(&mut rng, &stage) == 5));
    }
}
