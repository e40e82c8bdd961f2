//! Integration tests for the `mtlavsr` binary: stage chaining, manifest
//! idempotence, exit codes, and the baseline-equivalence contract.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const BIN: &str = env!("CARGO_BIN_EXE_mtlavsr");

/// Tiny configuration: 10 utterances split 8/1/1, small network.
const TEST_CONFIG: &str = r#"
[corpus]
size = 10
seed = 77
target_duration_s = 1.2
duration_jitter_s = 0.05

[gmmhmm]
stage1_iterations = 2
stage2_iterations = 2
target_components = 2

[dnn]
lambdas = [0.3]
hidden_layers = 1
hidden_dim = 16
max_epochs = 1

[experiment]
snrs_db = [-3.0]
babble_sources = 2
"#;

fn run(workdir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("MTLAVSR_WORKDIR", workdir)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, TEST_CONFIG).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn full_staged_pipeline_and_idempotence() {
    let dir = tempdir().unwrap();
    let work = dir.path().join("work");
    let config = write_config(dir.path());

    let out = run(&work, &config, &["synth"]);
    assert!(out.status.success(), "synth failed: {}", stderr_of(&out));

    // Corpus artifacts: 10 manifest rows, 8/1/1 split.
    let manifest = std::fs::read_to_string(work.join("corpus/corpus.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    let split = std::fs::read_to_string(work.join("corpus/split.tsv")).unwrap();
    let count = |set: &str| split.lines().filter(|l| l.ends_with(set)).count();
    assert_eq!(count("\ttrain"), 8);
    assert_eq!(count("\tcv"), 1);
    assert_eq!(count("\ttest"), 1);

    // Rerun: the stage is skipped and artifacts stay byte-identical.
    let before = std::fs::read(work.join("corpus/media.sha256")).unwrap();
    let out = run(&work, &config, &["synth"]);
    assert!(out.status.success());
    assert!(
        stderr_of(&out).contains("up to date"),
        "expected skip, got: {}",
        stderr_of(&out)
    );
    assert_eq!(before, std::fs::read(work.join("corpus/media.sha256")).unwrap());

    for stage in ["train-gmm", "align", "train-dnn", "decode", "score"] {
        let out = run(&work, &config, &[stage]);
        assert!(out.status.success(), "{stage} failed: {}", stderr_of(&out));
    }
    for artifact in [
        "gmm/acoustic.hmm",
        "gmm/visual.hmm",
        "gmm/acoustic.lda",
        "gmm/visual.lda",
        "align/acoustic.ali",
        "align/visual.ali",
        "align/priors.txt",
        "dnn/stl.net",
        "dnn/stl.log",
        "dnn/mtl0.3.net",
        "decode/stl/-3dB_OFF.hyp",
        "decode/mtl0.3/clean_ON.hyp",
        "decode/stl/OFF_ON.hyp",
        "results/results.csv",
    ] {
        assert!(work.join(artifact).exists(), "missing {artifact}");
    }

    // Grid: 5 rows x 2 models + header.
    let csv = std::fs::read_to_string(work.join("results/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 2);
    assert!(csv.starts_with("snr,video,model,wer_pct,subs,dels,ins,ref_len"));

    // Everything is cached now; a second score run skips.
    let out = run(&work, &config, &["score"]);
    assert!(stderr_of(&out).contains("up to date"));
}

#[test]
fn align_before_train_gmm_names_the_missing_stage() {
    let dir = tempdir().unwrap();
    let work = dir.path().join("work");
    let config = write_config(dir.path());

    let out = run(&work, &config, &["synth"]);
    assert!(out.status.success());
    let out = run(&work, &config, &["align"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("train-gmm"),
        "error must name the missing stage: {}",
        stderr_of(&out)
    );
}

#[test]
fn stl_flag_equals_lambda_zero_model_file() {
    let dir = tempdir().unwrap();
    let config = write_config(dir.path());

    let work_a = dir.path().join("a");
    let work_b = dir.path().join("b");
    for work in [&work_a, &work_b] {
        for stage in ["synth", "train-gmm", "align"] {
            let out = run(work, &config, &[stage]);
            assert!(out.status.success(), "{stage}: {}", stderr_of(&out));
        }
    }
    let out = run(&work_a, &config, &["train-dnn", "--stl"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = run(&work_b, &config, &["train-dnn", "--lambda", "0"]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let a = std::fs::read(work_a.join("dnn/stl.net")).unwrap();
    let b = std::fs::read(work_b.join("dnn/stl.net")).unwrap();
    assert_eq!(a, b, "the baseline flag and lambda=0 must produce identical models");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempdir().unwrap();
    let work = dir.path().join("work");

    // Unknown key.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[corpus]\nsizzle = 10\n").unwrap();
    let out = run(&work, &bad, &["synth"]);
    assert_eq!(out.status.code(), Some(2));

    // Missing grammar file: the diagnostic names the file.
    let missing = dir.path().join("missing_grammar.toml");
    std::fs::write(&missing, "[corpus]\nsize = 10\ngrammar = \"no/such.grammar\"\n").unwrap();
    let out = run(&work, &missing, &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("no/such.grammar"),
        "diagnostic must name the file: {}",
        stderr_of(&out)
    );
}

#[test]
fn experiment_with_two_seeds_writes_per_seed_and_mean_tables() {
    let dir = tempdir().unwrap();
    let work = dir.path().join("work");
    let config = write_config(dir.path());

    let out = run(&work, &config, &["experiment", "--seeds", "2"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    for artifact in [
        "results/results_seed77.csv",
        "results/results_seed78.csv",
        "results/results_mean.csv",
        "results/trend.txt",
    ] {
        assert!(work.join(artifact).exists(), "missing {artifact}");
    }
    let trend = std::fs::read_to_string(work.join("results/trend.txt")).unwrap();
    assert!(trend.lines().all(|l| l.starts_with("RULE ")));
    assert!(trend.contains("margin="));

    // Resume: a rerun skips all stages in both seed trees.
    let out = run(&work, &config, &["experiment", "--seeds", "2"]);
    assert!(out.status.success());
    let err = stderr_of(&out);
    assert!(err.contains("up to date"), "expected cached stages: {err}");
}
