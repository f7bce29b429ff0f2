//! End-to-end tests of the `prism` binary: exit codes, file formats,
//! determinism, sweeps, and trace export.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prism_cli::experiment::{AggregateRow, RecordLine, ResultRow, parse};
use prism_cli::traces::parse_traces;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prism"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("process was signalled")
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn split(text: &str) -> (Vec<ResultRow>, Vec<AggregateRow>) {
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for line in parse(text).unwrap() {
        match line {
            RecordLine::Row(row) => rows.push(row),
            RecordLine::Aggregate(agg) => aggregates.push(agg),
        }
    }
    (rows, aggregates)
}

const BASE: &str = r#"
strategy = "prism"
repetitions = 2

[tasks]
suite_seed = 7
count = 3
vocab = 8
distractors = 2
difficulty = 0.3

[search]
initial_width = 4
survivors = 1
target_width = 2
window_min = 0.25
window_max = 0.75
decay = 1.5
prune_interval = 2
total_steps = 8
gen_len = 8
block_size = 4
steps_per_block = 4
commit_threshold = 0.9
temperature = 0.7
seed = 11
"#;

#[test]
fn run_writes_rows_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", BASE);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let output = bin().arg("run").arg(&cfg).arg("--out").arg(out).output().unwrap();
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
        assert!(stdout(&output).contains("rows + aggregate"));
    }
    let text_a = std::fs::read(&a).unwrap();
    let text_b = std::fs::read(&b).unwrap();
    assert_eq!(text_a, text_b, "reruns must be byte-identical");

    let text = String::from_utf8(text_a).unwrap();
    // Round trip: every parsed line re-serializes to its original bytes.
    for (line, raw) in parse(&text).unwrap().iter().zip(text.lines()) {
        assert_eq!(serde_json::to_string(line).unwrap(), raw);
    }
    let (rows, aggregates) = split(&text);
    assert_eq!(rows.len(), 6); // 3 tasks x 2 repetitions
    assert_eq!(aggregates.len(), 1);
    let agg = &aggregates[0];
    assert_eq!(agg.rows, 6);
    assert_eq!(agg.failures, 0);
    let n = rows.len() as f64;
    let acc: f64 = rows.iter().map(|r| f64::from(r.accuracy)).sum();
    assert_eq!(agg.mean_accuracy, acc / n, "aggregate must be the exact mean");
    for row in &rows {
        assert!(row.nfe >= 1);
        assert!(row.accuracy <= 1);
        assert!(row.error.is_none());
        assert!(row.wall_ms.is_none());
    }
    // Distinct (task, repetition) pairs get distinct derived seeds.
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 6);
}

#[test]
fn seed_flag_changes_rows_and_same_seed_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", BASE);
    let run = |out: &Path, seed: &str| {
        let output = bin()
            .arg("run")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .arg("--seed")
            .arg(seed)
            .output()
            .unwrap();
        assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
        std::fs::read(out).unwrap()
    };
    let a = run(&dir.path().join("a.jsonl"), "900");
    let b = run(&dir.path().join("b.jsonl"), "900");
    let c = run(&dir.path().join("c.jsonl"), "901");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn injected_failures_flag_rows_and_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.toml",
        &format!("{BASE}\n[backend]\ninject_failures = [1]\n"),
    );
    let out = dir.path().join("results.jsonl");
    let output = bin().arg("run").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(code(&output), 3, "stderr: {}", stderr(&output));
    let (rows, aggregates) = split(&std::fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 6, "the run must continue past failures");
    assert_eq!(aggregates[0].failures, 2);
    for row in &rows {
        if row.task == 1 {
            assert!(row.error.is_some());
            assert_eq!(row.accuracy, 0);
        } else {
            assert!(row.error.is_none());
            assert!(row.nfe >= 1);
        }
    }
}

#[test]
fn validate_config_reports_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.toml", BASE);
    let output = bin().arg("validate-config").arg(&good).output().unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert!(stdout(&output).starts_with("ok:"));

    let bad_values = write(
        dir.path(),
        "bad-values.toml",
        &BASE.replace("window_min = 0.25", "window_min = 0.9")
            .replace("window_max = 0.75", "window_max = 0.2")
            .replace("vocab = 8", "vocab = 2"),
    );
    let output = bin().arg("validate-config").arg(&bad_values).output().unwrap();
    assert_eq!(code(&output), 2);
    let err = stderr(&output);
    assert!(err.contains("search.window"), "stderr: {err}");
    assert!(err.contains("tasks.vocab"), "stderr: {err}");

    let bad_key = write(
        dir.path(),
        "bad-key.toml",
        &format!("{BASE}\n[sweeep]\nmax_runs = 2\n"),
    );
    let output = bin().arg("validate-config").arg(&bad_key).output().unwrap();
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("sweeep"), "stderr: {}", stderr(&output));

    let missing_section = write(
        dir.path(),
        "missing-section.toml",
        &BASE.replace("strategy = \"prism\"", "strategy = \"best_of_n\""),
    );
    let output = bin().arg("validate-config").arg(&missing_section).output().unwrap();
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("best_of_n"), "stderr: {}", stderr(&output));
}

#[test]
fn malformed_window_flag_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", BASE);
    let output = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--window")
        .arg("0.1-0.6")
        .output()
        .unwrap();
    assert_eq!(code(&output), 2);
    assert!(stderr(&output).contains("--window"), "stderr: {}", stderr(&output));
}

const SWEEP: &str = r#"
strategy = "prism"
repetitions = 1

[tasks]
suite_seed = 7
count = 2
vocab = 8
distractors = 2
difficulty = 0.3

[search]
initial_width = 8
survivors = 2
target_width = 2
window_min = 0.25
window_max = 0.75
decay = 1.5
prune_interval = 2
total_steps = 8
gen_len = 8
block_size = 4
steps_per_block = 4
commit_threshold = 1.0
temperature = 0.7
seed = 3

[sweep]
max_runs = 8

[sweep.grid]
target_width = [2, 4, 8]
"#;

#[test]
fn sweeps_expand_the_grid_and_report_speedups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let base = dir.path().join("results.jsonl");
    let summary = dir.path().join("sweep.csv");
    let output = bin()
        .arg("sweep")
        .arg(&cfg)
        .arg("--out")
        .arg(&base)
        .arg("--summary")
        .arg(&summary)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));

    let csv = std::fs::read_to_string(&summary).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "target_width,accuracy,mean_nfe,reference_nfe,speedup");
    assert_eq!(lines.len(), 4, "header + one row per grid value:\n{csv}");

    let mut mean_nfes = Vec::new();
    for (line, expect_k) in lines[1..].iter().zip(["2", "4", "8"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], expect_k);
        let mean_nfe: f64 = cells[2].parse().unwrap();
        let reference: f64 = cells[3].parse().unwrap();
        let speedup: f64 = cells[4].parse().unwrap();
        assert_eq!(reference, 8.0 * 8.0, "linear reference is width x steps");
        assert_eq!(speedup, reference / mean_nfe, "speedup column must be exact");
        mean_nfes.push(mean_nfe);

        // Each setting's result file exists and agrees with the summary.
        let file = dir.path().join(format!("results__target_width={expect_k}.jsonl"));
        let (rows, aggregates) = split(&std::fs::read_to_string(&file).unwrap());
        assert_eq!(rows.len(), 2);
        assert_eq!(aggregates[0].mean_nfe, mean_nfe);
    }
    assert!(
        mean_nfes[0] < mean_nfes[1] && mean_nfes[1] < mean_nfes[2],
        "NFE must increase with the target width: {mean_nfes:?}"
    );
}

#[test]
fn an_empty_grid_sweeps_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sweep.toml",
        &SWEEP.replace("[sweep.grid]\ntarget_width = [2, 4, 8]\n", ""),
    );
    let base = dir.path().join("results.jsonl");
    let summary = dir.path().join("sweep.csv");
    let output = bin()
        .arg("sweep")
        .arg(&cfg)
        .arg("--out")
        .arg(&base)
        .arg("--summary")
        .arg(&summary)
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    assert!(base.exists(), "single run keeps the base file name");
    let csv = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(csv.lines().count(), 2, "header + one row:\n{csv}");
    assert!(csv.starts_with("accuracy,mean_nfe,reference_nfe,speedup"));
}

#[test]
fn oversized_grids_are_refused_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let output = bin()
        .arg("sweep")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("results.jsonl"))
        .arg("--max-runs")
        .arg("2")
        .output()
        .unwrap();
    assert_eq!(code(&output), 2);
    let err = stderr(&output);
    assert!(err.contains("sweep.grid"), "stderr: {err}");
    assert!(!dir.path().join("results__target_width=2.jsonl").exists());
}

#[test]
fn prism_traces_annotate_pruned_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    // A wide pool shrinking to 2 guarantees prune events.
    let cfg = write(
        dir.path(),
        "trace.toml",
        &BASE.replace("initial_width = 4", "initial_width = 6")
            .replace("survivors = 1", "survivors = 2")
            .replace("total_steps = 8", "total_steps = 16")
            .replace("gen_len = 8", "gen_len = 16"),
    );
    let output = bin()
        .arg("trace")
        .arg(&cfg)
        .arg("--out")
        .arg("tr/traces.jsonl")
        .env("PRISM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let path = dir.path().join("tr/traces.jsonl");
    assert!(path.exists(), "relative outputs resolve under PRISM_OUT_DIR");

    let rows = parse_traces(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(!rows.is_empty());
    let pruned: Vec<_> = rows.iter().filter(|r| r.pruned_at.is_some()).collect();
    assert!(!pruned.is_empty(), "6 -> 2 must prune somebody");
    for row in pruned {
        assert!(
            row.t > row.pruned_at.unwrap(),
            "a pruned trace ends at its prune step"
        );
    }
}

#[test]
fn single_traces_cover_every_requested_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "trace.toml",
        &BASE.replace("strategy = \"prism\"", "strategy = \"single\""),
    );
    let out = dir.path().join("traces.jsonl");
    let output = bin()
        .arg("trace")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--trajectories")
        .arg("3")
        .output()
        .unwrap();
    assert_eq!(code(&output), 0, "stderr: {}", stderr(&output));
    let rows = parse_traces(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let ids: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.trajectory).collect();
    assert_eq!(ids, (0..3).collect());
    assert!(rows.iter().all(|r| r.pruned_at.is_none()));
    for id in 0..3u64 {
        let series: Vec<u32> = rows
            .iter()
            .filter(|r| r.trajectory == id)
            .map(|r| r.t)
            .collect();
        let expect: Vec<u32> = (1..=8u32).rev().take(series.len()).collect();
        assert_eq!(series, expect, "trace {id} must be complete from the top");
    }
}
