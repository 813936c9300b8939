//! Exact-match evaluation, memory-capacity estimation, pair-count sweeps and
//! ablation comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use armt_core::checkpoint::read_manifest;
use armt_core::tasks::{collate, render};
use armt_core::{
    load_checkpoint, CarrySnapshot, Graph, Model, Precision, Real, SegmentBatch, SegmentedSample, TaskKind, TaskSpec,
    Variant,
};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Validation samples use seeds `2^63 + i`; training seeds stay below `2^63`.
pub const VALIDATION_SEED_BASE: u64 = 1 << 63;
/// Sweep samples live above every validation seed.
pub const TEST_SEED_BASE: u64 = 3 << 62;

pub fn validation_seed(i: usize) -> u64 {
    VALIDATION_SEED_BASE + i as u64
}

/// Seed of sample `i` at `n_pairs` under evaluation seed `eval_seed`.
pub fn test_seed(eval_seed: u64, n_pairs: usize, i: usize) -> u64 {
    assert!(eval_seed < 1 << 22 && n_pairs < 1 << 20 && i < 1 << 20, "sweep index out of range");
    TEST_SEED_BASE + (eval_seed << 40) + ((n_pairs as u64) << 20) + i as u64
}

/// Fraction of predictions equal to their answer as whole sequences.
pub fn exact_match<T: PartialEq>(predictions: &[Vec<T>], answers: &[Vec<T>]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(LabError::Config(format!(
            "{} predictions for {} answers",
            predictions.len(),
            answers.len()
        )));
    }
    if answers.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(answers).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / answers.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    /// Estimate clamped at 0.
    pub k: f64,
    /// Unclamped estimate; negative when accuracy is below chance.
    pub raw: f64,
    pub clamped: bool,
}

/// Number of pairs retained by a model that answers `n_pairs` queries with
/// exact match `em`, assuming it recalls `k` pairs and guesses uniformly
/// among `n_values` values otherwise: `k = n (v·em − 1) / (v − 1)`.
pub fn capacity_estimate(em: f64, n_pairs: usize, n_values: u64) -> Result<Capacity> {
    if n_values < 2 {
        return Err(LabError::Config(format!("n_values must be at least 2, got {n_values}")));
    }
    if !(0.0..=1.0).contains(&em) {
        return Err(LabError::Config(format!("exact match {em} outside [0, 1]")));
    }
    let v = n_values as f64;
    let raw = n_pairs as f64 * (v * em - 1.0) / (v - 1.0);
    Ok(Capacity {
        k: raw.max(0.0),
        raw,
        clamped: raw < 0.0,
    })
}

/// Greedy answers for samples that share one segment structure. Each
/// segment runs in its own graph, so memory stays flat in sequence length.
pub fn greedy_answers<R: Real>(model: &Model<R>, samples: &[SegmentedSample]) -> Result<Vec<Vec<usize>>> {
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let batch = samples.len();
    let segs = collate(samples)?;
    let snap = run_context(model, &segs[..segs.len() - 1], batch)?;
    let answer_len = first.answer().len();
    let mut cur: Vec<Vec<usize>> = samples.iter().map(|s| s.prompt().to_vec()).collect();
    let vocab = model.config().vocab;
    for _ in 0..answer_len {
        let len = cur[0].len();
        let seg = SegmentBatch::context(batch, len, cur.iter().flatten().copied().collect());
        let mut g = Graph::new();
        let carry = snap.load(&mut g)?;
        let (logits, _) = model.forward_segment(&mut g, &carry, &seg)?;
        let lv = g.value(logits).data();
        for (b, seq) in cur.iter_mut().enumerate() {
            let row = &lv[(b * len + len - 1) * vocab..][..vocab];
            seq.push(argmax(row));
        }
    }
    let prompt_len = first.prompt().len();
    Ok(cur.into_iter().map(|s| s[prompt_len..].to_vec()).collect())
}

/// Carry after folding `segments` (no gradients retained).
pub fn run_context<R: Real>(model: &Model<R>, segments: &[SegmentBatch], batch: usize) -> Result<CarrySnapshot<R>> {
    let mut g = Graph::new();
    let mut snap = model.init_carry(&mut g, batch)?.snapshot(&g);
    for seg in segments {
        let mut g = Graph::new();
        let carry = snap.load(&mut g)?;
        let (_, next) = model.forward_segment(&mut g, &carry, seg)?;
        snap = next.snapshot(&g);
    }
    Ok(snap)
}

fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Exact match over samples generated from `seeds` at `n_pairs`.
pub fn evaluate_seeds<R: Real>(
    model: &Model<R>,
    task: TaskSpec,
    n_pairs: usize,
    seeds: impl IntoIterator<Item = u64>,
    batch_size: usize,
) -> Result<f64> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let mut preds = Vec::with_capacity(seeds.len());
    let mut answers = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|&s| Ok(render(&task.generate(n_pairs, s)?)))
            .collect::<Result<Vec<_>>>()?;
        answers.extend(samples.iter().map(|s| s.answer()));
        preds.extend(greedy_answers(model, &samples)?);
    }
    exact_match(&preds, &answers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub em: f64,
    pub estimated_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub n_pairs: usize,
    /// Samples per seed.
    pub samples: usize,
    /// Mean over seeds.
    pub em: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub em_std: f64,
    pub estimated_k: f64,
    pub estimated_k_raw: f64,
    pub k_std: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model: String,
    pub task: TaskKind,
    pub value_len: usize,
    /// Largest pair count seen in training.
    pub train_n_pairs: usize,
    pub points: Vec<EvalPoint>,
    /// Grid points dropped because the generator cannot produce them.
    pub skipped: Vec<usize>,
    pub generalization_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub task: TaskSpec,
    pub grid: Vec<usize>,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub train_n_pairs: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Largest pair count with exact match ≥ 0.9, over the training length.
pub fn generalization_factor(points: &[EvalPoint], train_n_pairs: usize) -> f64 {
    if train_n_pairs == 0 {
        return 0.0;
    }
    points
        .iter()
        .filter(|p| p.em >= 0.9)
        .map(|p| p.n_pairs)
        .max()
        .map_or(0.0, |n| n as f64 / train_n_pairs as f64)
}

pub fn sweep<R: Real>(model: &Model<R>, model_id: &str, spec: &SweepSpec) -> Result<SweepReport> {
    if spec.grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::Config("`grid` must be strictly ascending".into()));
    }
    if spec.seeds.is_empty() || spec.samples == 0 {
        return Err(LabError::Config("sweep needs at least one seed and one sample".into()));
    }
    let n_values = spec.task.n_values();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &n in &spec.grid {
        let fits_keys = spec.task.max_pairs().map_or(true, |m| n as u64 <= m);
        if n == 0 || !fits_keys || n + 1 > model.config().max_segments {
            log::warn!("skipping grid point {n}: outside the generator or model range");
            skipped.push(n);
            continue;
        }
        let mut per_seed = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let em = evaluate_seeds(
                model,
                spec.task,
                n,
                (0..spec.samples).map(|i| test_seed(seed, n, i)),
                spec.batch_size,
            )?;
            let k = capacity_estimate(em, n, n_values)?;
            per_seed.push(SeedResult {
                seed,
                em,
                estimated_k: k.k,
            });
        }
        let ems: Vec<f64> = per_seed.iter().map(|s| s.em).collect();
        let ks: Vec<f64> = per_seed.iter().map(|s| s.estimated_k).collect();
        let (em, em_std) = mean_std(&ems);
        let (_, k_std) = mean_std(&ks);
        let cap = capacity_estimate(em.clamp(0.0, 1.0), n, n_values)?;
        log::info!("{model_id} n_pairs={n} em={em:.4} k={:.2}", cap.k);
        points.push(EvalPoint {
            n_pairs: n,
            samples: spec.samples,
            em,
            em_std,
            estimated_k: cap.k,
            estimated_k_raw: cap.raw,
            k_std,
            per_seed,
        });
    }
    Ok(SweepReport {
        model: model_id.to_string(),
        task: spec.task.kind,
        value_len: spec.task.value_len,
        train_n_pairs: spec.train_n_pairs,
        generalization_factor: generalization_factor(&points, spec.train_n_pairs),
        points,
        skipped,
    })
}

pub const SWEEP_CSV_HEADER: &str = "model,task,n_pairs,seed,samples,em,estimated_k";

/// One row per (grid point, seed).
pub fn sweep_csv(reports: &[SweepReport]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for p in &r.points {
            for s in &p.per_seed {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.6},{:.4}",
                    r.model,
                    r.task.as_str(),
                    p.n_pairs,
                    s.seed,
                    p.samples,
                    s.em,
                    s.estimated_k
                );
            }
        }
    }
    out
}

/// A model loaded from a checkpoint at its stored precision.
pub enum LoadedModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = read_manifest(path)?;
        Ok(match manifest.precision {
            Precision::F32 => LoadedModel::F32(load_checkpoint::<f32>(path)?.model),
            Precision::F64 => LoadedModel::F64(load_checkpoint::<f64>(path)?.model),
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            LoadedModel::F32(m) => m.config().variant,
            LoadedModel::F64(m) => m.config().variant,
        }
    }

    pub fn sweep(&self, model_id: &str, spec: &SweepSpec) -> Result<SweepReport> {
        match self {
            LoadedModel::F32(m) => sweep(m, model_id, spec),
            LoadedModel::F64(m) => sweep(m, model_id, spec),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    /// A required report is absent or has no usable grid point.
    Missing,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub status: VerdictStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task: TaskKind,
    pub train_n_pairs: usize,
    pub reports: BTreeMap<String, Option<SweepReport>>,
    pub verdicts: Vec<Verdict>,
}

impl Comparison {
    /// No claim failed (missing or inapplicable claims do not count).
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.status != VerdictStatus::Fail)
    }

    fn report(&self, v: Variant) -> Option<&SweepReport> {
        self.reports.get(v.as_str()).and_then(Option::as_ref)
    }

    /// Aligned table over the union of grid points; absent entries are `NA`.
    pub fn csv(&self) -> String {
        let mut grid: Vec<usize> = self
            .reports
            .values()
            .flatten()
            .flat_map(|r| r.points.iter().map(|p| p.n_pairs))
            .collect();
        grid.sort_unstable();
        grid.dedup();
        let armt = self.report(Variant::Armt);
        let mut out = String::from("model,task,n_pairs,em,em_std,estimated_k,k_std,delta_em_vs_armt,delta_k_vs_armt\n");
        for v in Variant::ALL {
            let Some(slot) = self.reports.get(v.as_str()) else { continue };
            for &n in &grid {
                let task = self.task.as_str();
                let point = slot.as_ref().and_then(|r| r.points.iter().find(|p| p.n_pairs == n));
                let Some(p) = point else {
                    let _ = writeln!(out, "{},{task},{n},NA,NA,NA,NA,NA,NA", v.as_str());
                    continue;
                };
                let base = armt.and_then(|r| r.points.iter().find(|q| q.n_pairs == n));
                let (de, dk) = match base {
                    Some(b) => (format!("{:.6}", p.em - b.em), format!("{:.4}", p.estimated_k - b.estimated_k)),
                    None => ("NA".into(), "NA".into()),
                };
                let _ = writeln!(
                    out,
                    "{},{task},{n},{:.6},{:.6},{:.4},{:.4},{de},{dk}",
                    v.as_str(),
                    p.em,
                    p.em_std,
                    p.estimated_k,
                    p.k_std
                );
            }
        }
        out
    }

    pub fn verdict_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            task: TaskKind,
            train_n_pairs: usize,
            passed: bool,
            verdicts: &'a [Verdict],
        }
        Ok(serde_json::to_string_pretty(&Out {
            task: self.task,
            train_n_pairs: self.train_n_pairs,
            passed: self.passed(),
            verdicts: &self.verdicts,
        })?)
    }
}

pub const CLAIM_GAMMA: &str = "armt_beats_no_gamma_beyond_2x_training_length";
pub const CLAIM_CAPACITY: &str = "armt_capacity_exceeds_rmt_and_prmt_at_max_grid_point";

/// Aligns the variants' sweeps and evaluates the ablation claims.
pub fn compare_ablation(task: TaskKind, train_n_pairs: usize, reports: Vec<(Variant, Option<SweepReport>)>) -> Comparison {
    let mut cmp = Comparison {
        task,
        train_n_pairs,
        reports: reports.into_iter().map(|(v, r)| (v.as_str().to_string(), r)).collect(),
        verdicts: Vec::new(),
    };
    cmp.verdicts.push(gamma_verdict(&cmp));
    cmp.verdicts.push(capacity_verdict(&cmp));
    cmp
}

fn verdict(claim: &str, status: VerdictStatus, detail: String) -> Verdict {
    Verdict {
        claim: claim.into(),
        status,
        detail,
    }
}

fn gamma_verdict(cmp: &Comparison) -> Verdict {
    let (Some(a), Some(b)) = (cmp.report(Variant::Armt), cmp.report(Variant::ArmtNoGamma)) else {
        return verdict(CLAIM_GAMMA, VerdictStatus::Missing, "armt or armt_no_gamma report absent".into());
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for p in a.points.iter().filter(|p| p.n_pairs >= 2 * cmp.train_n_pairs) {
        if let Some(q) = b.points.iter().find(|q| q.n_pairs == p.n_pairs) {
            ok &= p.em > q.em;
            detail.push(format!("n={}: {:.4} vs {:.4}", p.n_pairs, p.em, q.em));
        }
    }
    if detail.is_empty() {
        return verdict(CLAIM_GAMMA, VerdictStatus::Missing, "no shared grid point at 2x training length".into());
    }
    let status = if ok { VerdictStatus::Pass } else { VerdictStatus::Fail };
    verdict(CLAIM_GAMMA, status, detail.join("; "))
}

fn capacity_verdict(cmp: &Comparison) -> Verdict {
    if cmp.task != TaskKind::Remember {
        return verdict(CLAIM_CAPACITY, VerdictStatus::NotApplicable, "capacity is compared on remember".into());
    }
    let reports = [Variant::Armt, Variant::Rmt, Variant::Prmt].map(|v| cmp.report(v));
    let [Some(a), Some(r), Some(p)] = reports else {
        return verdict(CLAIM_CAPACITY, VerdictStatus::Missing, "armt, rmt or prmt report absent".into());
    };
    let shared = a
        .points
        .iter()
        .map(|x| x.n_pairs)
        .filter(|n| r.points.iter().any(|x| x.n_pairs == *n) && p.points.iter().any(|x| x.n_pairs == *n))
        .max();
    let Some(n) = shared else {
        return verdict(CLAIM_CAPACITY, VerdictStatus::Missing, "no shared grid point".into());
    };
    let k = |rep: &SweepReport| rep.points.iter().find(|x| x.n_pairs == n).map_or(0.0, |x| x.estimated_k);
    let (ka, kr, kp) = (k(a), k(r), k(p));
    let status = if ka > kr && ka > kp {
        VerdictStatus::Pass
    } else {
        VerdictStatus::Fail
    };
    verdict(
        CLAIM_CAPACITY,
        status,
        format!("n={n}: armt {ka:.2}, rmt {kr:.2}, prmt {kp:.2}"),
    )
}
