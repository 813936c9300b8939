#![allow(dead_code)]

use armt_core::{ModelConfig, Precision, TaskSpec, Variant};
use armt_lab::config::schedule;
use armt_lab::RunConfig;
use std::path::Path;

/// One-layer hidden-8 model on rewrite, two short stages, 64-bit.
pub fn tiny(variant: Variant, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new("tiny", variant, TaskSpec::rewrite(), 3);
    cfg.output_dir = out.to_path_buf();
    cfg.model = ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        mem_tokens: 2,
        d_mem: 4,
        d_val: 4,
        ..ModelConfig::new(variant)
    };
    cfg.train.stages = schedule(&[1, 3], 3);
    cfg.train.batch_size = 4;
    cfg.train.val_samples = 8;
    cfg.train.eval_every = 2;
    cfg.train.warmup_steps = 1;
    cfg.train.lr = 1e-3;
    cfg.train.precision = Precision::F64;
    cfg.eval.batch_size = 8;
    cfg
}
