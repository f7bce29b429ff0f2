//! Experiment configuration: TOML schema, file loading, and validation with
//! full field paths.

use std::fmt;
use std::path::{Path, PathBuf};

use prism_core::HtsConfig;
use serde::{Deserialize, Serialize};

/// One validation failure, addressed by the offending field's path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl Issue {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Anything that should stop the run before results are produced.
#[derive(Debug)]
pub enum CliError {
    /// Configuration problems, each with a field path.
    Config(Vec<Issue>),
    /// Filesystem or serialization trouble.
    Io(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config(vec![Issue::new(field, message)])
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(issues) => {
                write!(f, "invalid configuration")?;
                for issue in issues {
                    write!(f, "\n  {issue}")?;
                }
                Ok(())
            }
            CliError::Io(message) => write!(f, "{message}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Which decoding strategy an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Single,
    BestOfN,
    Prism,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::BestOfN => "best_of_n",
            Strategy::Prism => "prism",
        })
    }
}

/// How a finished pool is collapsed to one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    Svf,
    Majority,
    Executor,
}

impl SelectionKind {
    pub fn to_core(self) -> prism_core::hts::SelectionStrategy {
        match self {
            SelectionKind::Svf => prism_core::hts::SelectionStrategy::Svf,
            SelectionKind::Majority => prism_core::hts::SelectionStrategy::Majority,
            SelectionKind::Executor => prism_core::hts::SelectionStrategy::Executor,
        }
    }
}

/// The planted-task suite an experiment runs over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSuite {
    /// Optional reference to a TOML file carrying these same fields; when
    /// set, the file's contents replace the inline ones.
    pub file: Option<PathBuf>,
    /// Seed of the task generator (independent of the search seed, so the
    /// same suite can be decoded under many search seeds).
    pub suite_seed: u64,
    pub count: u64,
    /// Defaults to the search window length.
    pub gen_len: Option<usize>,
    pub vocab: usize,
    pub distractors: usize,
    /// Oracle fidelity exponent; larger keeps the denoiser uninformative
    /// longer.
    pub difficulty: f64,
}

impl Default for TaskSuite {
    fn default() -> Self {
        Self {
            file: None,
            suite_seed: 0,
            count: 16,
            gen_len: None,
            vocab: 32,
            distractors: 2,
            difficulty: 1.0,
        }
    }
}

/// Simulated backend dials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendParams {
    pub oracle_floor: f64,
    pub distractor_mass: f64,
    pub matched_boost: f64,
    pub verifier_gap: f64,
    pub verifier_noise_sd: f64,
    pub verifier_flip_rate: f64,
    /// Fault injection: denoiser calls fail for these task indices, so the
    /// partial-failure path can be exercised deterministically.
    pub inject_failures: Vec<u64>,
}

impl Default for BackendParams {
    fn default() -> Self {
        let oracle = prism_core::sim::OracleParams::default();
        let verifier = prism_core::sim::SimVerifierParams::default();
        Self {
            oracle_floor: oracle.floor,
            distractor_mass: oracle.distractor_mass,
            matched_boost: oracle.matched_boost,
            verifier_gap: verifier.gap,
            verifier_noise_sd: verifier.noise_sd,
            verifier_flip_rate: verifier.flip_rate,
            inject_failures: Vec::new(),
        }
    }
}

impl BackendParams {
    pub fn oracle(&self) -> prism_core::sim::OracleParams {
        prism_core::sim::OracleParams {
            floor: self.oracle_floor,
            distractor_mass: self.distractor_mass,
            matched_boost: self.matched_boost,
        }
    }

    pub fn verifier(&self) -> prism_core::sim::SimVerifierParams {
        prism_core::sim::SimVerifierParams {
            gap: self.verifier_gap,
            noise_sd: self.verifier_noise_sd,
            flip_rate: self.verifier_flip_rate,
        }
    }
}

/// Settings specific to the best-of-N strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfNSection {
    pub n: usize,
    #[serde(default = "default_majority")]
    pub selection: SelectionKind,
}

fn default_majority() -> SelectionKind {
    SelectionKind::Majority
}

/// Settings specific to the staged-search strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrismSection {
    pub selection: SelectionKind,
}

impl Default for PrismSection {
    fn default() -> Self {
        Self {
            selection: SelectionKind::Svf,
        }
    }
}

/// Sweep settings: a Cartesian grid over search fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    /// Refuses to launch more runs than this.
    pub max_runs: u64,
    /// Summary table path; defaults to `sweep.csv`.
    pub summary: Option<PathBuf>,
    /// Field name → list of values.
    pub grid: toml::Table,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            max_runs: 64,
            summary: None,
            grid: toml::Table::new(),
        }
    }
}

/// A full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub repetitions: u64,
    /// Result file; relative paths resolve under the output directory.
    pub output: Option<PathBuf>,
    /// Opt-in wall-clock notes on every row. Off by default because timing
    /// breaks byte-identical reruns.
    pub record_wall: bool,
    pub tasks: TaskSuite,
    pub search: HtsConfig,
    pub backend: BackendParams,
    pub best_of_n: Option<BestOfNSection>,
    pub prism: Option<PrismSection>,
    pub sweep: Option<SweepSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Prism,
            repetitions: 1,
            output: None,
            record_wall: false,
            tasks: TaskSuite::default(),
            search: HtsConfig::default(),
            backend: BackendParams::default(),
            best_of_n: None,
            prism: None,
            sweep: None,
        }
    }
}

/// Search fields a config file, CLI overrides, or a sweep grid may set.
pub const SEARCH_FIELDS: &[&str] = &[
    "initial_width",
    "survivors",
    "target_width",
    "window_min",
    "window_max",
    "decay",
    "prune_interval",
    "total_steps",
    "gen_len",
    "block_size",
    "steps_per_block",
    "commit_threshold",
    "temperature",
    "commit_mode",
    "svf_completion_mode",
    "remask",
    "markers",
    "eos_token",
    "seed",
];

const TOP_FIELDS: &[&str] = &[
    "strategy",
    "repetitions",
    "output",
    "record_wall",
    "tasks",
    "search",
    "backend",
    "best_of_n",
    "prism",
    "sweep",
];
const TASK_FIELDS: &[&str] = &[
    "file",
    "suite_seed",
    "count",
    "gen_len",
    "vocab",
    "distractors",
    "difficulty",
];
const BACKEND_FIELDS: &[&str] = &[
    "oracle_floor",
    "distractor_mass",
    "matched_boost",
    "verifier_gap",
    "verifier_noise_sd",
    "verifier_flip_rate",
    "inject_failures",
];
const REMASK_FIELDS: &[&str] = &[
    "rule",
    "pool_param",
    "subset_fraction",
    "protect_committed_blocks",
];
const BEST_OF_N_FIELDS: &[&str] = &["n", "selection"];
const PRISM_FIELDS: &[&str] = &["selection"];
const SWEEP_FIELDS: &[&str] = &["max_runs", "summary", "grid"];

fn check_table_keys(
    value: &toml::Value,
    known: &[&str],
    path: &str,
    issues: &mut Vec<Issue>,
) {
    if let Some(table) = value.as_table() {
        for key in table.keys() {
            if !known.contains(&key.as_str()) {
                let field = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                issues.push(Issue::new(field, "unknown field"));
            }
        }
    }
}

/// Rejects misspelled fields before the typed deserialization (which would
/// silently ignore them).
fn check_unknown_fields(raw: &toml::Value) -> Vec<Issue> {
    let mut issues = Vec::new();
    check_table_keys(raw, TOP_FIELDS, "", &mut issues);
    let section = |name: &str| raw.get(name);
    if let Some(tasks) = section("tasks") {
        check_table_keys(tasks, TASK_FIELDS, "tasks", &mut issues);
        if let Some(table) = tasks.as_table()
            && table.contains_key("file")
            && table.len() > 1
        {
            issues.push(Issue::new(
                "tasks",
                "inline fields conflict with tasks.file; define the suite in one place",
            ));
        }
    }
    if let Some(search) = section("search") {
        check_table_keys(search, SEARCH_FIELDS, "search", &mut issues);
        if let Some(remask) = search.get("remask") {
            check_table_keys(remask, REMASK_FIELDS, "search.remask", &mut issues);
        }
    }
    if let Some(backend) = section("backend") {
        check_table_keys(backend, BACKEND_FIELDS, "backend", &mut issues);
    }
    if let Some(bon) = section("best_of_n") {
        check_table_keys(bon, BEST_OF_N_FIELDS, "best_of_n", &mut issues);
    }
    if let Some(prism) = section("prism") {
        check_table_keys(prism, PRISM_FIELDS, "prism", &mut issues);
    }
    if let Some(sweep) = section("sweep") {
        check_table_keys(sweep, SWEEP_FIELDS, "sweep", &mut issues);
    }
    issues
}

impl ExperimentConfig {
    /// Parses a config file, resolves any task-suite reference relative to
    /// the file's directory, and rejects unknown fields.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        let raw: toml::Value = toml::from_str(&text)
            .map_err(|e| CliError::config("(file)", format!("TOML parse error: {e}")))?;
        let issues = check_unknown_fields(&raw);
        if !issues.is_empty() {
            return Err(CliError::Config(issues));
        }
        let mut cfg: ExperimentConfig = raw
            .try_into()
            .map_err(|e| CliError::config("(file)", format!("{e}")))?;
        if let Some(suite_path) = cfg.tasks.file.clone() {
            let resolved = if suite_path.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(&suite_path)
            } else {
                suite_path.clone()
            };
            let suite_text = std::fs::read_to_string(&resolved).map_err(|e| {
                CliError::config(
                    "tasks.file",
                    format!("cannot read {}: {e}", resolved.display()),
                )
            })?;
            let suite_raw: toml::Value = toml::from_str(&suite_text).map_err(|e| {
                CliError::config("tasks.file", format!("TOML parse error: {e}"))
            })?;
            let mut issues = Vec::new();
            check_table_keys(&suite_raw, TASK_FIELDS, "tasks", &mut issues);
            if !issues.is_empty() {
                return Err(CliError::Config(issues));
            }
            let mut suite: TaskSuite = suite_raw
                .try_into()
                .map_err(|e| CliError::config("tasks.file", format!("{e}")))?;
            if suite.file.is_some() {
                return Err(CliError::config(
                    "tasks.file",
                    "a referenced suite may not reference another file",
                ));
            }
            suite.file = Some(suite_path);
            cfg.tasks = suite;
        }
        Ok(cfg)
    }

    /// Generation window length the tasks use.
    pub fn task_gen_len(&self) -> usize {
        self.tasks.gen_len.unwrap_or(self.search.gen_len)
    }

    /// Collects every violation; empty means the config can run.
    pub fn check(&self) -> Vec<Issue> {
        let mut issues: Vec<Issue> = self
            .search
            .check()
            .into_iter()
            .map(|i| Issue::new(format!("search.{}", i.field), i.message))
            .collect();
        if self.repetitions == 0 {
            issues.push(Issue::new("repetitions", "must be at least 1"));
        }
        if self.tasks.count == 0 {
            issues.push(Issue::new("tasks.count", "must be at least 1"));
        }
        if self.tasks.vocab < 3 {
            issues.push(Issue::new("tasks.vocab", "needs at least 3 tokens"));
        }
        if !(self.tasks.difficulty > 0.0 && self.tasks.difficulty.is_finite()) {
            issues.push(Issue::new(
                "tasks.difficulty",
                "must be finite and positive",
            ));
        }
        if let Some(len) = self.tasks.gen_len
            && len != self.search.gen_len
        {
            issues.push(Issue::new(
                "tasks.gen_len",
                format!(
                    "suite length {len} disagrees with search.gen_len {}",
                    self.search.gen_len
                ),
            ));
        }
        let b = &self.backend;
        for (field, value, lo, hi) in [
            ("backend.oracle_floor", b.oracle_floor, 0.0, 1.0),
            ("backend.distractor_mass", b.distractor_mass, 0.0, 1.0),
            ("backend.matched_boost", b.matched_boost, 0.0, 1.0),
        ] {
            if !(lo..=hi).contains(&value) || !value.is_finite() {
                issues.push(Issue::new(field, format!("must lie in [{lo}, {hi}]")));
            }
        }
        if !(b.verifier_gap >= 0.0 && b.verifier_gap.is_finite()) {
            issues.push(Issue::new("backend.verifier_gap", "must be non-negative"));
        }
        if !(b.verifier_noise_sd >= 0.0 && b.verifier_noise_sd.is_finite()) {
            issues.push(Issue::new(
                "backend.verifier_noise_sd",
                "must be non-negative",
            ));
        }
        if !(0.0..0.5).contains(&b.verifier_flip_rate) {
            issues.push(Issue::new(
                "backend.verifier_flip_rate",
                "must lie in [0, 0.5)",
            ));
        }
        match self.strategy {
            Strategy::BestOfN => match &self.best_of_n {
                None => issues.push(Issue::new(
                    "best_of_n",
                    "strategy \"best_of_n\" needs a [best_of_n] section with n",
                )),
                Some(section) if section.n == 0 => {
                    issues.push(Issue::new("best_of_n.n", "must be at least 1"));
                }
                Some(_) => {}
            },
            Strategy::Single | Strategy::Prism => {}
        }
        issues
    }

    /// Errors with every violation, if any.
    pub fn validate(&self) -> Result<(), CliError> {
        let issues = self.check();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(issues))
        }
    }

    /// Selection strategy the configured decoding strategy uses.
    pub fn selection(&self) -> SelectionKind {
        match self.strategy {
            Strategy::Single => SelectionKind::Svf, // unused by single runs
            Strategy::BestOfN => self
                .best_of_n
                .as_ref()
                .map_or(SelectionKind::Majority, |s| s.selection),
            Strategy::Prism => self
                .prism
                .as_ref()
                .map_or(SelectionKind::Svf, |s| s.selection),
        }
    }
}

/// Applies one `field = value` override to the search block. `field` accepts
/// the dotted `remask.*` names too. Used by sweeps and CLI flags.
pub fn apply_search_field(
    search: &mut HtsConfig,
    field: &str,
    value: &toml::Value,
    path: &str,
) -> Result<(), CliError> {
    let bad = |expected: &str| -> CliError {
        CliError::config(path.to_string(), format!("expected {expected}, got {value}"))
    };
    let as_usize = |value: &toml::Value| -> Result<usize, CliError> {
        value
            .as_integer()
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| bad("a non-negative integer"))
    };
    let as_u32 = |value: &toml::Value| -> Result<u32, CliError> {
        value
            .as_integer()
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| bad("a non-negative integer"))
    };
    let as_f64 = |value: &toml::Value| -> Result<f64, CliError> {
        match value {
            toml::Value::Float(v) => Ok(*v),
            toml::Value::Integer(v) => Ok(*v as f64),
            _ => Err(bad("a number")),
        }
    };
    let as_mode = |value: &toml::Value| -> Result<prism_core::CommitMode, CliError> {
        match value.as_str() {
            Some("argmax") => Ok(prism_core::CommitMode::Argmax),
            Some("sample") => Ok(prism_core::CommitMode::Sample),
            _ => Err(bad("\"argmax\" or \"sample\"")),
        }
    };
    match field {
        "initial_width" => search.initial_width = as_usize(value)?,
        "survivors" => search.survivors = as_usize(value)?,
        "target_width" => search.target_width = as_usize(value)?,
        "window_min" => search.window_min = as_f64(value)?,
        "window_max" => search.window_max = as_f64(value)?,
        "decay" => search.decay = as_f64(value)?,
        "prune_interval" => search.prune_interval = as_u32(value)?,
        "total_steps" => search.total_steps = as_u32(value)?,
        "gen_len" => search.gen_len = as_usize(value)?,
        "block_size" => search.block_size = as_usize(value)?,
        "steps_per_block" => search.steps_per_block = as_u32(value)?,
        "commit_threshold" => search.commit_threshold = as_f64(value)?,
        "temperature" => search.temperature = as_f64(value)?,
        "commit_mode" => search.commit_mode = as_mode(value)?,
        "svf_completion_mode" => search.svf_completion_mode = as_mode(value)?,
        "seed" => {
            search.seed = value
                .as_integer()
                .and_then(|v| u64::try_from(v).ok())
                .ok_or_else(|| bad("a non-negative integer"))?;
        }
        "eos_token" => {
            search.eos_token = value
                .as_integer()
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| bad("a non-negative integer"))?;
        }
        "remask.rule" => {
            search.remask.rule = match value.as_str() {
                Some("top_fraction") => prism_core::branching::PoolRule::TopFraction,
                Some("threshold") => prism_core::branching::PoolRule::Threshold,
                _ => return Err(bad("\"top_fraction\" or \"threshold\"")),
            };
        }
        "remask.pool_param" => search.remask.pool_param = as_f64(value)?,
        "remask.subset_fraction" => search.remask.subset_fraction = as_f64(value)?,
        "remask.protect_committed_blocks" => {
            search.remask.protect_committed_blocks =
                value.as_bool().ok_or_else(|| bad("a boolean"))?;
        }
        other => {
            return Err(CliError::config(
                path.to_string(),
                format!("\"{other}\" is not a search field"),
            ));
        }
    }
    Ok(())
}
