//! `prism` — benchmark harness for verifier-guided search over simulated
//! masked-diffusion decoders.
//!
//! Exit codes: 0 success, 2 configuration error, 3 finished with partial
//! failures (some rows are error-flagged but the run completed).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prism_cli::config::{CliError, ExperimentConfig};
use prism_cli::{experiment, sweep, traces};

#[derive(Parser)]
#[command(
    name = "prism",
    version,
    about = "Benchmark harness for verifier-guided search over masked-diffusion decoders"
)]
struct Cli {
    /// Directory resolving relative output paths.
    #[arg(long, env = "PRISM_OUT_DIR", global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: one JSONL row per (task, repetition) plus an
    /// aggregate line.
    Run(RunArgs),
    /// Run a Cartesian grid of experiments and summarize them as CSV.
    Sweep(SweepArgs),
    /// Export per-trajectory entropy traces for one task.
    Trace(TraceArgs),
    /// Check a config file and report what it would run.
    ValidateConfig(ValidateArgs),
}

/// Command-line overrides for the `[search]` block.
#[derive(Args)]
struct SearchOverrides {
    /// Initial pool width N.
    #[arg(long)]
    n: Option<usize>,
    /// Survivors kept per prune event.
    #[arg(long)]
    survivors: Option<usize>,
    /// Final pool width K.
    #[arg(long)]
    target_k: Option<usize>,
    /// Stage window as MIN:MAX fractions of the countdown.
    #[arg(long, value_name = "MIN:MAX")]
    window: Option<String>,
    /// Width decay rate (greater than 1).
    #[arg(long)]
    decay: Option<f64>,
    /// Steps between prune events.
    #[arg(long)]
    interval: Option<u32>,
    /// Commit threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Sampling temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl SearchOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        let search = &mut cfg.search;
        if let Some(n) = self.n {
            search.initial_width = n;
        }
        if let Some(survivors) = self.survivors {
            search.survivors = survivors;
        }
        if let Some(k) = self.target_k {
            search.target_width = k;
        }
        if let Some(window) = &self.window {
            let (lo, hi) = parse_window(window)?;
            search.window_min = lo;
            search.window_max = hi;
        }
        if let Some(decay) = self.decay {
            search.decay = decay;
        }
        if let Some(interval) = self.interval {
            search.prune_interval = interval;
        }
        if let Some(tau) = self.tau {
            search.commit_threshold = tau;
        }
        if let Some(temperature) = self.temperature {
            search.temperature = temperature;
        }
        if let Some(seed) = self.seed {
            search.seed = seed;
        }
        Ok(())
    }
}

fn parse_window(text: &str) -> Result<(f64, f64), CliError> {
    let parts = text
        .split_once(':')
        .ok_or_else(|| CliError::config("--window", "expected MIN:MAX, e.g. 0.1:0.6"))?;
    let lo: f64 = parts
        .0
        .trim()
        .parse()
        .map_err(|_| CliError::config("--window", format!("\"{}\" is not a number", parts.0)))?;
    let hi: f64 = parts
        .1
        .trim()
        .parse()
        .map_err(|_| CliError::config("--window", format!("\"{}\" is not a number", parts.1)))?;
    Ok((lo, hi))
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    config: PathBuf,
    /// Result file; overrides the config's `output`.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: SearchOverrides,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config file (TOML) with a [sweep] section.
    config: PathBuf,
    /// Base name for per-setting result files.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Summary CSV path; overrides the config's `sweep.summary`.
    #[arg(long, value_name = "FILE")]
    summary: Option<PathBuf>,
    /// Refuse to launch more runs than this.
    #[arg(long)]
    max_runs: Option<u64>,
    #[command(flatten)]
    overrides: SearchOverrides,
}

#[derive(Args)]
struct TraceArgs {
    /// Experiment config file (TOML); strategy must be single or prism.
    config: PathBuf,
    /// Trace file; defaults to traces.jsonl.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// How many trajectories to trace (single strategy only).
    #[arg(long, default_value_t = 8)]
    trajectories: usize,
    /// Task index to decode.
    #[arg(long, default_value_t = 0)]
    task: u64,
    #[command(flatten)]
    overrides: SearchOverrides,
}

#[derive(Args)]
struct ValidateArgs {
    /// Experiment config file (TOML).
    config: PathBuf,
}

fn resolve_out(out_dir: Option<&Path>, path: PathBuf) -> PathBuf {
    match out_dir {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent()
        && !parent.as_os_str().is_empty()
    {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    file.write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    file.flush()
        .map_err(|e| CliError::Io(format!("cannot flush {}: {e}", path.display())))?;
    Ok(())
}

fn cmd_run(out_dir: Option<&Path>, args: RunArgs) -> Result<bool, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    let outcome = experiment::run_experiment(&cfg)?;
    let path = resolve_out(
        out_dir,
        args.out
            .or_else(|| cfg.output.clone())
            .unwrap_or_else(|| PathBuf::from("results.jsonl")),
    );
    experiment::write_results(&path, &outcome)?;
    let agg = &outcome.aggregate;
    println!(
        "wrote {} rows + aggregate to {}",
        outcome.rows.len(),
        path.display()
    );
    println!(
        "strategy {} | accuracy {:.4} | mean NFE {:.2} | mean SVF calls {:.2} | failures {}",
        agg.strategy, agg.mean_accuracy, agg.mean_nfe, agg.mean_svf_calls, agg.failures
    );
    Ok(agg.failures > 0)
}

fn cmd_sweep(out_dir: Option<&Path>, args: SweepArgs) -> Result<bool, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg)?;
    if let Some(max_runs) = args.max_runs {
        cfg.sweep.get_or_insert_with(Default::default).max_runs = max_runs;
    }
    let base = resolve_out(
        out_dir,
        args.out
            .or_else(|| cfg.output.clone())
            .unwrap_or_else(|| PathBuf::from("results.jsonl")),
    );
    let outcome = sweep::run_sweep(&cfg, &base)?;
    let summary_path = resolve_out(
        out_dir,
        args.summary
            .or_else(|| cfg.sweep.as_ref().and_then(|s| s.summary.clone()))
            .unwrap_or_else(|| PathBuf::from("sweep.csv")),
    );
    write_text(&summary_path, &outcome.summary_csv)?;
    println!(
        "ran {} settings; summary -> {}",
        outcome.runs.len(),
        summary_path.display()
    );
    for run in &outcome.runs {
        let setting = run
            .setting
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!(
            "  [{}] accuracy {:.4} | mean NFE {:.2} | reference {:.0} | speedup {:.2} -> {}",
            if setting.is_empty() { "base" } else { &setting },
            run.outcome.aggregate.mean_accuracy,
            run.outcome.aggregate.mean_nfe,
            run.reference_nfe,
            run.speedup,
            run.file.display()
        );
    }
    print!("{}", outcome.summary_csv);
    Ok(outcome.failures() > 0)
}

fn cmd_trace(out_dir: Option<&Path>, args: TraceArgs) -> Result<bool, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg)?;
    let rows = traces::export_entropy_traces(&cfg, args.trajectories, args.task)?;
    let path = resolve_out(
        out_dir,
        args.out.unwrap_or_else(|| PathBuf::from("traces.jsonl")),
    );
    write_text(&path, &traces::emit_traces(&rows)?)?;
    let trajectories = rows
        .iter()
        .map(|r| r.trajectory)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    println!(
        "wrote {} entropy samples over {} trajectories to {}",
        rows.len(),
        trajectories,
        path.display()
    );
    Ok(false)
}

fn cmd_validate(args: ValidateArgs) -> Result<bool, CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    cfg.validate()?;
    println!(
        "ok: strategy {} | {} tasks x {} repetitions | N {} S {} K {} | T {} steps",
        cfg.strategy,
        cfg.tasks.count,
        cfg.repetitions,
        cfg.search.initial_width,
        cfg.search.survivors,
        cfg.search.target_width,
        cfg.search.total_steps
    );
    Ok(false)
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::Run(args) => cmd_run(out_dir, args),
        Command::Sweep(args) => cmd_sweep(out_dir, args),
        Command::Trace(args) => cmd_trace(out_dir, args),
        Command::ValidateConfig(args) => cmd_validate(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(3),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(2)
        }
    }
}
