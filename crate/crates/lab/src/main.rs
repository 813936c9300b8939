use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use armt_core::{RetrievalSample, TaskKind, TaskSpec, Variant};
use armt_lab::config::resolve_output;
use armt_lab::evaluator::{sweep_csv, LoadedModel};
use armt_lab::{capacity_estimate, compare_ablation, train, LabError, RunConfig, SweepSpec};
use clap::{Args, Parser, Subcommand};

/// Train and evaluate segment-recurrent memory models on associative retrieval.
///
/// Exit codes: 0 success, 1 runtime error, 2 configuration error,
/// 3 a comparison claim failed.
#[derive(Parser)]
#[command(name = "armt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated samples as JSONL.
    GenerateData(GenerateArgs),
    /// Train a model through its curriculum.
    Train(TrainArgs),
    /// Exact match and capacity of one checkpoint over a pair-count grid.
    EvalSweep(SweepArgs),
    /// Sweep several variants on one grid and check the ablation claims.
    Compare(CompareArgs),
    /// Capacity estimate k = n(v·em − 1)/(v − 1).
    Capacity(CapacityArgs),
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Run config supplying task and evaluation defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// remember or rewrite.
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    key_len: Option<usize>,
    #[arg(long)]
    value_len: Option<usize>,
}

impl TaskArgs {
    fn resolve(&self) -> anyhow::Result<(TaskSpec, Option<RunConfig>)> {
        let cfg = self.config.as_deref().map(RunConfig::load).transpose()?;
        let mut task = match (self.task, &cfg) {
            (Some(TaskKind::Remember), _) => TaskSpec::remember(),
            (Some(TaskKind::Rewrite), _) => TaskSpec::rewrite(),
            (None, Some(c)) => c.task,
            (None, None) => return Err(LabError::Config("give --task or --config".into()).into()),
        };
        if let Some(k) = self.key_len {
            task.key_len = k;
        }
        if let Some(v) = self.value_len {
            task.value_len = v;
        }
        Ok((task, cfg))
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    n_pairs: usize,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Sample i uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Trainer checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Comma-separated ascending pair counts.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Samples per grid point and seed.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training length used for the generalization factor.
    #[arg(long)]
    train_n_pairs: Option<usize>,
}

impl GridArgs {
    fn spec(&self, task: TaskSpec, cfg: Option<&RunConfig>) -> anyhow::Result<SweepSpec> {
        let eval = cfg.map(|c| c.eval.clone()).unwrap_or_default();
        let train_n_pairs = match (self.train_n_pairs, cfg) {
            (Some(n), _) => n,
            (None, Some(c)) => c.final_train_pairs(),
            (None, None) => return Err(LabError::Config("give --train-n-pairs or --config".into()).into()),
        };
        Ok(SweepSpec {
            task,
            grid: self.grid.clone().unwrap_or(eval.grid),
            samples: self.samples.unwrap_or(eval.samples),
            seeds: self.seeds.clone().unwrap_or(eval.seeds),
            batch_size: self.batch_size.unwrap_or(eval.batch_size),
            train_n_pairs,
        })
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Model id written to the CSV; defaults to the variant name.
    #[arg(long)]
    model_id: Option<String>,
    /// CSV output; a JSON report is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    armt: Option<PathBuf>,
    #[arg(long)]
    armt_no_gamma: Option<PathBuf>,
    #[arg(long)]
    rmt: Option<PathBuf>,
    #[arg(long)]
    prmt: Option<PathBuf>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Receives comparison.csv, verdict.json and per-variant sweeps.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CapacityArgs {
    #[arg(long)]
    em: f64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    v: u64,
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let (task, _) = args.task.resolve()?;
    let mut out = String::new();
    for i in 0..args.samples {
        let s: RetrievalSample = task.generate(args.n_pairs, args.seed + i as u64)?;
        out.push_str(&s.to_json_line()?);
        out.push('\n');
    }
    write_file(&resolve_output(&args.out), &out)
}

fn eval_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let (task, cfg) = args.task.resolve()?;
    let spec = args.grid.spec(task, cfg.as_ref())?;
    let model = LoadedModel::load(&args.checkpoint)?;
    let id = args.model_id.unwrap_or_else(|| model.variant().as_str().to_string());
    let report = model.sweep(&id, &spec)?;
    let out = resolve_output(&args.out);
    write_file(&out, &sweep_csv(std::slice::from_ref(&report)))?;
    write_file(&out.with_extension("json"), &serde_json::to_string_pretty(&report)?)?;
    println!("generalization factor {:.2}", report.generalization_factor);
    Ok(())
}

/// Returns whether every claim held.
fn compare(args: CompareArgs) -> anyhow::Result<bool> {
    let (task, cfg) = args.task.resolve()?;
    let spec = args.grid.spec(task, cfg.as_ref())?;
    let out_dir = resolve_output(&args.out_dir);
    let slots = [
        (Variant::Armt, args.armt),
        (Variant::ArmtNoGamma, args.armt_no_gamma),
        (Variant::Rmt, args.rmt),
        (Variant::Prmt, args.prmt),
    ];
    let mut reports = Vec::new();
    for (variant, path) in slots {
        let report = match path {
            Some(p) => {
                let model = LoadedModel::load(&p)?;
                if model.variant() != variant {
                    return Err(LabError::Config(format!(
                        "--{} checkpoint holds a {} model",
                        variant.as_str().replace('_', "-"),
                        model.variant()
                    ))
                    .into());
                }
                let r = model.sweep(variant.as_str(), &spec)?;
                write_file(
                    &out_dir.join(format!("sweep-{}.csv", variant.as_str())),
                    &sweep_csv(std::slice::from_ref(&r)),
                )?;
                Some(r)
            }
            None => {
                log::warn!("no checkpoint for {variant}; its rows are left empty");
                None
            }
        };
        reports.push((variant, report));
    }
    let cmp = compare_ablation(task.kind, spec.train_n_pairs, reports);
    write_file(&out_dir.join("comparison.csv"), &cmp.csv())?;
    write_file(&out_dir.join("verdict.json"), &cmp.verdict_json()?)?;
    for v in &cmp.verdicts {
        println!("{:?} {}: {}", v.status, v.claim, v.detail);
    }
    Ok(cmp.passed())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenerateData(a) => generate(a)?,
        Command::Train(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let outcome = train(cfg, a.resume.as_deref())?;
            for s in &outcome.stages {
                println!(
                    "stage {} ({} pairs): {} steps, val em {}{}",
                    s.stage,
                    s.n_pairs,
                    s.steps,
                    s.val_em.map_or("-".into(), |e| format!("{e:.4}")),
                    if s.warning { " (budget spent)" } else { "" }
                );
            }
            if let Some(p) = outcome.final_checkpoint {
                println!("final checkpoint {}", p.display());
            }
        }
        Command::EvalSweep(a) => eval_sweep(a)?,
        Command::Compare(a) => {
            if !compare(a)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Capacity(a) => {
            let c = capacity_estimate(a.em, a.n, a.v)?;
            if c.clamped {
                eprintln!("below chance: raw estimate {}", round6(c.raw));
            }
            println!("{}", round6(c.k));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            let config = e.downcast_ref::<LabError>().is_some_and(LabError::is_config)
                || e.downcast_ref::<armt_core::Error>().is_some_and(|c| matches!(c, armt_core::Error::Config(_)));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
