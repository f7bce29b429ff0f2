//! Runs one experiment: every (task, repetition) pair produces a result row,
//! followed by one aggregate row. Rows are deterministic given the config.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use prism_core::baselines::{AnswerExtractor, run_best_of_n, run_single};
use prism_core::diffusion::{Conditioning, DenoiserBackend, DenoiserOutput};
use prism_core::hts::{HtsDrivers, run_hts};
use prism_core::rng::{self, lane};
use prism_core::sim::{
    PlantedTask, SimDenoiser, SimVerifier, executor_check, make_planted_task,
};
use prism_core::svf::VerifyPromptTemplate;
use prism_core::{BackendError, HtsConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CliError, ExperimentConfig, Strategy};

/// One (task, repetition) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: u64,
    pub repetition: u64,
    pub strategy: Strategy,
    /// 1 when the selected sequence solves the task, else 0.
    pub accuracy: u8,
    /// Denoiser evaluations charged to this run.
    pub nfe: u64,
    /// Verifier scoring calls charged to this run.
    pub svf_calls: u64,
    /// Seed this row ran under, derived from the root seed; replaying with
    /// it reproduces the row exactly.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Summary row closing a result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// Always true; distinguishes this line from result rows.
    pub aggregate: bool,
    pub strategy: Strategy,
    pub tasks: u64,
    pub repetitions: u64,
    pub rows: u64,
    pub failures: u64,
    pub mean_accuracy: f64,
    pub mean_nfe: f64,
    pub mean_svf_calls: f64,
}

/// Any line of a result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordLine {
    Aggregate(AggregateRow),
    Row(ResultRow),
}

/// Everything `run` produces before anything is written.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub aggregate: AggregateRow,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> u64 {
        self.aggregate.failures
    }
}

/// Denoiser wrapper that fails every call; models a backend outage for one
/// task so partial-failure handling stays testable.
struct FailingDenoiser;

impl DenoiserBackend for FailingDenoiser {
    fn evaluate(
        &self,
        _state: &prism_core::state::SeqState,
        _conditioning: &Conditioning,
        _noise_level: u32,
    ) -> Result<DenoiserOutput, BackendError> {
        Err(BackendError::new("injected backend failure"))
    }
}

fn row_seed(root: u64, repetition: u64, task: u64) -> u64 {
    rng::derive_seed(root, &[lane::REPETITION, repetition, task])
}

/// Seed a trace export runs under: the task's repetition-0 row seed, so the
/// exported run is the same one `run` would score.
pub(crate) fn trace_seed(cfg: &ExperimentConfig, task: u64) -> u64 {
    row_seed(cfg.search.seed, 0, task)
}

pub(crate) fn build_task(
    cfg: &ExperimentConfig,
    index: u64,
) -> Result<PlantedTask, prism_core::Error> {
    make_planted_task(
        cfg.tasks.suite_seed,
        index,
        cfg.task_gen_len(),
        cfg.tasks.vocab,
        cfg.tasks.distractors,
        cfg.tasks.difficulty,
    )
}

fn run_one(cfg: &ExperimentConfig, repetition: u64, task_index: u64) -> ResultRow {
    let started = Instant::now();
    let seed = row_seed(cfg.search.seed, repetition, task_index);
    let mut row = ResultRow {
        task: task_index,
        repetition,
        strategy: cfg.strategy,
        accuracy: 0,
        nfe: 0,
        svf_calls: 0,
        seed,
        error: None,
        wall_ms: None,
    };
    let task = match build_task(cfg, task_index) {
        Ok(task) => task,
        Err(e) => {
            row.error = Some(format!("task generation failed: {e}"));
            return row;
        }
    };
    let mut search: HtsConfig = cfg.search.clone();
    search.seed = seed;

    let oracle = SimDenoiser {
        task: task.clone(),
        params: cfg.backend.oracle(),
    };
    let failing = FailingDenoiser;
    let denoiser: &dyn DenoiserBackend = if cfg.backend.inject_failures.contains(&task_index) {
        &failing
    } else {
        &oracle
    };
    let verifier = SimVerifier {
        task: task.clone(),
        params: cfg.backend.verifier(),
        seed,
    };
    let template = VerifyPromptTemplate::math_default();
    let conditioning = task.conditioning();
    let problem = task.problem_text();
    let check = |sequence: &[prism_core::Token]| executor_check(&task, sequence);
    let drivers = HtsDrivers {
        denoiser,
        verifier: &verifier,
        template: &template,
        conditioning: &conditioning,
        problem: &problem,
        extractor: AnswerExtractor::FullSequence,
        executor: Some(&check),
    };

    let selection = cfg.selection().to_core();
    let outcome: Result<(Vec<prism_core::Token>, u64, u64), String> = match cfg.strategy {
        Strategy::Single => run_single(&search, drivers.denoiser, drivers.conditioning)
            .map(|run| {
                let nfe = run.ledger.denoise_total();
                let svf = run.ledger.svf_total();
                (run.sequence, nfe, svf)
            })
            .map_err(|e| e.to_string()),
        Strategy::BestOfN => {
            let n = cfg.best_of_n.as_ref().map_or(1, |s| s.n);
            run_best_of_n(&search, n, &drivers, selection)
                .map(|run| {
                    let nfe = run.ledger.denoise_total();
                    let svf = run.ledger.svf_total();
                    (run.selection.sequence, nfe, svf)
                })
                .map_err(|e| e.to_string())
        }
        Strategy::Prism => match run_hts(&search, &drivers, selection) {
            Ok(run) => {
                let nfe = run.ledger.denoise_total();
                let svf = run.ledger.svf_total();
                Ok((run.selection.sequence, nfe, svf))
            }
            Err(abort) => {
                row.nfe = abort.ledger.denoise_total();
                row.svf_calls = abort.ledger.svf_total();
                Err(abort.to_string())
            }
        },
    };

    match outcome {
        Ok((sequence, nfe, svf_calls)) => {
            row.accuracy = u8::from(executor_check(&task, &sequence));
            row.nfe = nfe;
            row.svf_calls = svf_calls;
        }
        Err(message) => row.error = Some(message),
    }
    if cfg.record_wall {
        row.wall_ms = Some(started.elapsed().as_millis() as u64);
    }
    row
}

/// Runs `repetitions × tasks` decodes (possibly in parallel) and aggregates.
/// Row order is deterministic: repetition-major, then task index.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    cfg.validate()?;
    let jobs: Vec<(u64, u64)> = (0..cfg.repetitions)
        .flat_map(|rep| (0..cfg.tasks.count).map(move |task| (rep, task)))
        .collect();
    let rows: Vec<ResultRow> = jobs
        .par_iter()
        .map(|&(rep, task)| run_one(cfg, rep, task))
        .collect();

    let n = rows.len() as f64;
    let failures = rows.iter().filter(|r| r.error.is_some()).count() as u64;
    let mean_accuracy = rows.iter().map(|r| f64::from(r.accuracy)).sum::<f64>() / n;
    let mean_nfe = rows.iter().map(|r| r.nfe as f64).sum::<f64>() / n;
    let mean_svf_calls = rows.iter().map(|r| r.svf_calls as f64).sum::<f64>() / n;
    let aggregate = AggregateRow {
        aggregate: true,
        strategy: cfg.strategy,
        tasks: cfg.tasks.count,
        repetitions: cfg.repetitions,
        rows: rows.len() as u64,
        failures,
        mean_accuracy,
        mean_nfe,
        mean_svf_calls,
    };
    Ok(ExperimentOutcome { rows, aggregate })
}

/// Serializes rows plus the aggregate line, one JSON object per line.
pub fn emit(outcome: &ExperimentOutcome) -> Result<String, CliError> {
    let mut text = String::new();
    for row in &outcome.rows {
        let line = serde_json::to_string(row)
            .map_err(|e| CliError::Io(format!("cannot serialize row: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    let line = serde_json::to_string(&outcome.aggregate)
        .map_err(|e| CliError::Io(format!("cannot serialize aggregate: {e}")))?;
    text.push_str(&line);
    text.push('\n');
    Ok(text)
}

/// Parses a result file back into rows and aggregates.
pub fn parse(text: &str) -> Result<Vec<RecordLine>, CliError> {
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| CliError::Io(format!("cannot parse result line: {e}")))
        })
        .collect()
}

/// Writes a result file atomically enough for our purposes: full buffer,
/// single write, flush.
pub fn write_results(path: &Path, outcome: &ExperimentOutcome) -> Result<(), CliError> {
    if let Some(parent) = path.parent()
        && !parent.as_os_str().is_empty()
    {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
    }
    let text = emit(outcome)?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    file.flush()
        .map_err(|e| CliError::Io(format!("cannot flush {}: {e}", path.display())))?;
    Ok(())
}
