//! Entropy-trace export: one row per (trajectory, step), with prune
//! annotations so downstream plots can mark where each trajectory died.

use std::collections::BTreeMap;

use prism_core::baselines::{AnswerExtractor, run_best_of_n};
use prism_core::hts::{HtsDrivers, run_hts};
use prism_core::sim::{SimDenoiser, SimVerifier};
use prism_core::svf::VerifyPromptTemplate;
use serde::{Deserialize, Serialize};

use crate::config::{CliError, ExperimentConfig, Strategy};

/// One exported entropy sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub trajectory: u64,
    /// Countdown step the sample was taken at.
    pub t: u32,
    /// Mean token entropy of the trajectory's generation window.
    pub mean_entropy: f64,
    /// Set on every row of a pruned trajectory: the step it left the pool.
    /// Its samples all lie at steps strictly above this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_at: Option<u32>,
}

/// Decodes one task and exports per-trajectory mean-entropy series.
///
/// `single` runs `n_trajectories` independent decodes (complete traces);
/// `prism` runs one search (pruned trajectories are annotated). Other
/// strategies have no meaningful per-trajectory series.
pub fn export_entropy_traces(
    cfg: &ExperimentConfig,
    n_trajectories: usize,
    task_index: u64,
) -> Result<Vec<TraceRow>, CliError> {
    cfg.validate()?;
    if n_trajectories == 0 {
        return Err(CliError::config("trajectories", "must be at least 1"));
    }
    let seed = crate::experiment::trace_seed(cfg, task_index);
    let task = crate::experiment::build_task(cfg, task_index)
        .map_err(|e| CliError::config("tasks", format!("task generation failed: {e}")))?;
    let mut search = cfg.search.clone();
    search.seed = seed;
    let oracle = SimDenoiser {
        task: task.clone(),
        params: cfg.backend.oracle(),
    };
    let verifier = SimVerifier {
        task: task.clone(),
        params: cfg.backend.verifier(),
        seed,
    };
    let template = VerifyPromptTemplate::math_default();
    let conditioning = task.conditioning();
    let problem = task.problem_text();
    let drivers = HtsDrivers {
        denoiser: &oracle,
        verifier: &verifier,
        template: &template,
        conditioning: &conditioning,
        problem: &problem,
        extractor: AnswerExtractor::FullSequence,
        executor: None,
    };

    match cfg.strategy {
        Strategy::Single => {
            let run = run_best_of_n(
                &search,
                n_trajectories,
                &drivers,
                prism_core::hts::SelectionStrategy::Majority,
            )
            .map_err(|e| CliError::Io(format!("trace run failed: {e}")))?;
            let mut rows = Vec::new();
            for (i, steps) in run.runs.iter().enumerate() {
                for step in steps {
                    if let Some(mean_entropy) = step.mean_entropy {
                        rows.push(TraceRow {
                            trajectory: i as u64,
                            t: step.t,
                            mean_entropy,
                            pruned_at: None,
                        });
                    }
                }
            }
            Ok(rows)
        }
        Strategy::Prism => {
            let run = run_hts(&search, &drivers, cfg.selection().to_core())
                .map_err(|abort| CliError::Io(format!("trace run failed: {abort}")))?;
            let pruned: BTreeMap<u64, u32> = run.trace.pruned_at.iter().copied().collect();
            let mut rows: Vec<TraceRow> = run
                .trace
                .entropy
                .iter()
                .map(|point| TraceRow {
                    trajectory: point.trajectory,
                    t: point.t,
                    mean_entropy: point.mean_entropy,
                    pruned_at: pruned.get(&point.trajectory).copied(),
                })
                .collect();
            // Step order within a trajectory is already descending in t;
            // group rows by trajectory for plot-friendly files.
            rows.sort_by(|a, b| a.trajectory.cmp(&b.trajectory).then(b.t.cmp(&a.t)));
            Ok(rows)
        }
        Strategy::BestOfN => Err(CliError::config(
            "strategy",
            "entropy traces need strategy \"single\" or \"prism\"",
        )),
    }
}

/// Serializes trace rows, one JSON object per line.
pub fn emit_traces(rows: &[TraceRow]) -> Result<String, CliError> {
    let mut text = String::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| CliError::Io(format!("cannot serialize trace row: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    Ok(text)
}

/// Parses a trace file back into rows.
pub fn parse_traces(text: &str) -> Result<Vec<TraceRow>, CliError> {
    text.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| CliError::Io(format!("cannot parse trace line: {e}")))
        })
        .collect()
}
