use std::path::Path;
use std::process::{Command, Output};

fn duplex(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duplex"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = duplex(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// The single stderr line of a failed command.
fn err(dir: &Path, args: &[&str]) -> String {
    let out = duplex(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    lines[0].to_string()
}

const SMALL: &str = r#"
[model]
n_layers = 1
d = 16
n_heads = 2
d_ff = 32
max_len = 16

[representation]
dense_dim = 8
sparse_k = 8

[pretrain]
steps = 6
batch_size = 8
warmup_steps = 1

[finetune]
batch_size = 4
hard_negatives = 2

[teacher]
epochs = 1

[data]
corpus = "data/corpus.tsv"
queries = "data/queries.tsv"
qrels = "data/qrels.tsv"
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(dir.path(), &["synth", "--num-docs", "40", "--num-queries", "12", "--out-dir", "data"]);
    dir
}

fn run_all(dir: &Path, out: &str) -> String {
    let common = ["--config", "small.toml", "--out-dir", out];
    let stages: [&[&str]; 11] = [
        &["build-vocab"],
        &["pretrain"],
        &["finetune", "--stage", "1"],
        &["mine-negatives"],
        &["finetune", "--stage", "2"],
        &["teach"],
        &["finetune", "--stage", "3"],
        &["encode"],
        &["index"],
        &["search"],
        &["eval"],
    ];
    let mut last = String::new();
    for stage in stages {
        let args: Vec<&str> = stage.iter().chain(common.iter()).copied().collect();
        last = ok(dir, &args);
    }
    last
}

#[test]
fn full_pipeline_writes_metrics_and_a_complete_manifest() {
    let dir = workspace();
    let stdout = run_all(dir.path(), "run");
    let metrics: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    for key in ["mrr@10", "recall@50", "recall@1000", "ndcg@10"] {
        let v = metrics[key].as_f64().unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=1.0).contains(&v));
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    let outputs = manifest["outputs"].as_object().unwrap();
    for entry in std::fs::read_dir(dir.path().join("run")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != "manifest.json" {
            assert!(outputs.contains_key(&name), "{name} is not hash-listed");
        }
    }
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 3);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let dir = workspace();
    run_all(dir.path(), "a");
    run_all(dir.path(), "b");
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.json"), read("b/metrics.json"));
    assert_eq!(read("a/stage3.ckpt"), read("b/stage3.ckpt"));
}

#[test]
fn missing_predecessor_names_the_command() {
    let dir = workspace();
    let line = err(dir.path(), &["finetune", "--stage", "2", "--config", "small.toml", "--out-dir", "run"]);
    assert!(line.starts_with("error[missing-artifact]:"), "{line}");
    assert!(line.contains("finetune --stage 1"), "{line}");
    let line = err(dir.path(), &["search", "--config", "small.toml", "--out-dir", "run"]);
    assert!(line.contains("`index`"), "{line}");
}

#[test]
fn both_decoders_off_is_a_config_error() {
    let dir = workspace();
    std::fs::write(dir.path().join("off.toml"), "[pretrain]\ncls_decoding = false\not_decoding = false\n").unwrap();
    let line = err(dir.path(), &["pretrain", "--config", "off.toml", "--out-dir", "run"]);
    assert!(line.starts_with("error[config]:") && line.contains("pretrain.cls_decoding"), "{line}");
}

#[test]
fn eval_refuses_tampered_artifacts() {
    let dir = workspace();
    run_all(dir.path(), "run");
    std::fs::write(dir.path().join("run/run.tsv"), "q00000\td00000\t1\t1.0\n").unwrap();
    let line = err(dir.path(), &["eval", "--config", "small.toml", "--out-dir", "run"]);
    assert!(line.starts_with("error[validation]:") && line.contains("run.tsv"), "{line}");
}

#[test]
fn changed_config_in_existing_run_is_refused() {
    let dir = workspace();
    ok(dir.path(), &["build-vocab", "--config", "small.toml", "--out-dir", "run"]);
    let line = err(dir.path(), &["pretrain", "--config", "small.toml", "--seed", "9", "--out-dir", "run"]);
    assert!(line.starts_with("error[validation]:"), "{line}");
}

#[test]
fn bad_stage_number_is_rejected_by_the_parser() {
    let dir = workspace();
    let out = duplex(dir.path(), &["finetune", "--stage", "4"]);
    assert!(!out.status.success());
}
