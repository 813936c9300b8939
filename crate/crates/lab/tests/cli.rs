//! End-to-end runs of the `armt` binary.

use armt_core::{save_checkpoint, Model, ModelConfig, Variant};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn armt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_armt"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("ARMT_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn fixture_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        mem_tokens: 2,
        d_mem: 4,
        d_val: 4,
        ..ModelConfig::new(variant)
    }
}

const COMPARE_ARGS: [&str; 10] = [
    "--task",
    "rewrite",
    "--grid",
    "1,2,4",
    "--samples",
    "16",
    "--seeds",
    "0,1",
    "--train-n-pairs",
    "1",
];

/// Rewrites the fixture checkpoints and the golden comparison table.
/// Run with `cargo test -p armt-lab --test cli -- --ignored` after an
/// intentional change to model numerics.
#[test]
#[ignore]
fn regenerate_fixtures() {
    let dir = fixtures();
    for (i, v) in Variant::ALL.iter().enumerate() {
        let model = Model::<f32>::new(fixture_config(*v), 100 + i as u64).unwrap();
        save_checkpoint(&dir.join(format!("{v}.ckpt")), &model, None, None, &serde_json::Value::Null).unwrap();
    }
    let tmp = tempfile::tempdir().unwrap();
    let o = run_compare(tmp.path());
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
    std::fs::copy(tmp.path().join("cmp/comparison.csv"), dir.join("comparison.golden.csv")).unwrap();
}

fn run_compare(cwd: &Path) -> Output {
    let dir = fixtures();
    let paths: Vec<String> = Variant::ALL
        .iter()
        .map(|v| dir.join(format!("{v}.ckpt")).display().to_string())
        .collect();
    let mut args = vec![
        "compare",
        "--armt",
        &paths[0],
        "--armt-no-gamma",
        &paths[1],
        "--rmt",
        &paths[2],
        "--prmt",
        &paths[3],
        "--out-dir",
        "cmp",
    ];
    args.extend(COMPARE_ARGS);
    armt(&args, cwd)
}

#[test]
fn compare_matches_golden_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_compare(tmp.path());
    // untrained fixtures cannot support the claims
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let got = std::fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
    let want = std::fs::read_to_string(fixtures().join("comparison.golden.csv")).unwrap();
    assert_eq!(got, want);
    let verdict: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("cmp/verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict["passed"], false);
    for v in ["armt", "armt_no_gamma", "rmt", "prmt"] {
        assert!(tmp.path().join(format!("cmp/sweep-{v}.csv")).exists());
    }
}

#[test]
fn compare_with_missing_slot_flags_gaps() {
    let tmp = tempfile::tempdir().unwrap();
    let armt_ckpt = fixtures().join("armt.ckpt").display().to_string();
    let mut args = vec!["compare", "--armt", &armt_ckpt, "--out-dir", "cmp"];
    args.extend(COMPARE_ARGS);
    let o = armt(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
    assert!(csv.contains("rmt,rewrite,4,NA,NA,NA,NA,NA,NA"));
    assert!(stdout(&o).contains("Missing"));
}

#[test]
fn compare_rejects_a_checkpoint_in_the_wrong_slot() {
    let tmp = tempfile::tempdir().unwrap();
    let rmt = fixtures().join("rmt.ckpt").display().to_string();
    let mut args = vec!["compare", "--armt", &rmt, "--out-dir", "cmp"];
    args.extend(COMPARE_ARGS);
    let o = armt(&args, tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn capacity_prints_the_estimate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = armt(&["capacity", "--em", "1.0", "--n", "200", "--v", "16"], tmp.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "200");
    let o = armt(&["capacity", "--em", "0.55", "--n", "100", "--v", "16"], tmp.path());
    assert_eq!(stdout(&o).trim(), "52");
    let o = armt(&["capacity", "--em", "0", "--n", "30", "--v", "16"], tmp.path());
    assert_eq!(stdout(&o).trim(), "0");
    assert!(stderr(&o).contains("-2"));
    let o = armt(&["capacity", "--em", "0.5", "--n", "30", "--v", "1"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("name = \"x\"\noutput_dir = \"o\"\n[model]\nvariant = \"armt\"\nlayers = \"two\"\n[task]\nkind = \"rewrite\"\nkey_len = 1\n[train]\nstages = [{ n_pairs = 1, steps = 1 }]\n", "layers"),
        ("name = \"x\"\noutput_dir = \"o\"\n[model]\nvariant = \"armt\"\n[task]\nkind = \"rewrite\"\nkey_len = 1\n[train]\nstages = [{ n_pairs = 5, steps = 1 }, { n_pairs = 2, steps = 1 }]\n", "train.stages[1].n_pairs"),
        ("name = \"x\"\noutput_dir = \"o\"\n[model]\nvariant = \"armt\"\n[task]\nkind = \"rewrite\"\nkey_len = 1\n[train]\nstages = [{ n_pairs = 1, steps = 1 }]\nbogus = 3\n", "bogus"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let path = tmp.path().join(format!("bad{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let o = armt(&["train", "--config", path.to_str().unwrap()], tmp.path());
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
        assert!(stderr(&o).contains(field), "case {i}: {}", stderr(&o));
    }
}

#[test]
fn generate_data_writes_parseable_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["generate-data", "--task", "remember", "--n-pairs", "7", "--samples", "5", "--seed", "40", "--out", "data/r.jsonl"];
    let o = armt(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("data/r.jsonl")).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for (i, line) in lines.iter().enumerate() {
        let s = armt_core::RetrievalSample::from_json_line(line).unwrap();
        assert_eq!(s.seed, 40 + i as u64);
        assert_eq!(s, armt_core::TaskSpec::remember().generate(7, 40 + i as u64).unwrap());
    }
    // the output root override relocates relative paths
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_armt"))
        .args(args)
        .current_dir(tmp.path())
        .env("ARMT_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(root.path().join("data/r.jsonl").exists());
}

#[test]
fn eval_sweep_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = fixtures().join("prmt.ckpt").display().to_string();
    let run = |out: &str| {
        let o = armt(
            &["eval-sweep", "--checkpoint", &ckpt, "--task", "rewrite", "--grid", "1,3", "--samples", "12", "--seeds", "0,1,2", "--train-n-pairs", "1", "--out", out],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(tmp.path().join(out)).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next(), Some(armt_lab::evaluator::SWEEP_CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(tmp.path().join("a.json").exists());
}

#[test]
fn train_runs_a_tiny_curriculum() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "name = \"t\"\nseed = 1\noutput_dir = \"run\"\n[model]\nvariant = \"rmt\"\nlayers = 1\nhidden = 8\nheads = 2\nmem_tokens = 2\n[task]\nkind = \"rewrite\"\nkey_len = 1\n[train]\nbatch_size = 4\nval_samples = 4\neval_every = 2\nstages = [{ n_pairs = 1, steps = 2 }, { n_pairs = 2, steps = 2 }]\n";
    std::fs::write(tmp.path().join("t.toml"), cfg).unwrap();
    let o = armt(&["train", "--config", "t.toml"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    for f in ["final.ckpt", "metrics.jsonl", "config.toml", "checkpoints/stage-00.ckpt", "checkpoints/stage-01.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let o = armt(&["train", "--config", "t.toml", "--resume", "run/checkpoints/stage-00.ckpt"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("stage 1 (2 pairs)"));
}
