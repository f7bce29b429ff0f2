//! Cartesian sweeps over search fields, with a CSV summary comparing every
//! setting against a linear-search reference budget.

use std::path::{Path, PathBuf};

use crate::config::{CliError, ExperimentConfig, apply_search_field};
use crate::experiment::{ExperimentOutcome, run_experiment, write_results};

/// One grid assignment: `(field, value)` pairs in sorted field order.
pub type Setting = Vec<(String, toml::Value)>;

/// One completed sweep entry.
#[derive(Debug)]
pub struct SweepRun {
    pub setting: Setting,
    /// Result file this entry's rows were written to.
    pub file: PathBuf,
    pub outcome: ExperimentOutcome,
    /// Linear-search budget a width-N exhaustive decode would pay:
    /// `initial_width × total_steps` of the effective config.
    pub reference_nfe: f64,
    /// `reference_nfe / mean_nfe`.
    pub speedup: f64,
}

/// Everything a sweep produces.
#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub summary_csv: String,
}

impl SweepOutcome {
    pub fn failures(&self) -> u64 {
        self.runs.iter().map(|r| r.outcome.failures()).sum()
    }
}

fn scalar_str(value: &toml::Value) -> String {
    match value {
        toml::Value::Integer(v) => v.to_string(),
        toml::Value::Float(v) => v.to_string(),
        toml::Value::Boolean(v) => v.to_string(),
        toml::Value::String(v) => v.clone(),
        other => other.to_string(),
    }
}

fn file_safe(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// `results.jsonl` + `[("target_width", 4)]` → `results__target_width=4.jsonl`.
fn setting_path(base: &Path, setting: &Setting) -> PathBuf {
    if setting.is_empty() {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".to_string());
    let ext = base
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "jsonl".to_string());
    let mut name = stem;
    for (key, value) in setting {
        name.push_str("__");
        name.push_str(&file_safe(key));
        name.push('=');
        name.push_str(&file_safe(&scalar_str(value)));
    }
    name.push('.');
    name.push_str(&ext);
    base.with_file_name(name)
}

/// Expands the grid into the full Cartesian product, fields in sorted order,
/// values in listed order. An empty grid yields one empty setting.
fn expand_grid(grid: &toml::Table) -> Result<Vec<Setting>, CliError> {
    let mut keys: Vec<&String> = grid.keys().collect();
    keys.sort();
    let mut axes: Vec<(&String, &[toml::Value])> = Vec::with_capacity(keys.len());
    for key in keys {
        let values = grid[key].as_array().ok_or_else(|| {
            CliError::config(format!("sweep.grid.{key}"), "must be an array of values")
        })?;
        if values.is_empty() {
            return Err(CliError::config(
                format!("sweep.grid.{key}"),
                "must list at least one value",
            ));
        }
        axes.push((key, values.as_slice()));
    }
    let mut settings: Vec<Setting> = vec![Vec::new()];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(settings.len() * values.len());
        for prefix in &settings {
            for value in values {
                let mut setting = prefix.clone();
                setting.push(((*key).clone(), value.clone()));
                next.push(setting);
            }
        }
        settings = next;
    }
    Ok(settings)
}

fn csv_cell(text: &str) -> String {
    if text.contains(',') || text.contains('"') || text.contains('\n') {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

/// Runs the whole grid. Each setting gets its own result file next to
/// `base_output`; the summary table compares settings at a glance.
pub fn run_sweep(cfg: &ExperimentConfig, base_output: &Path) -> Result<SweepOutcome, CliError> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let settings = expand_grid(&sweep.grid)?;
    if settings.len() as u64 > sweep.max_runs {
        return Err(CliError::config(
            "sweep.grid",
            format!(
                "{} runs exceed sweep.max_runs = {}",
                settings.len(),
                sweep.max_runs
            ),
        ));
    }

    // Apply and validate every setting before running anything, so a bad
    // grid value fails fast instead of after hours of decoding.
    let mut experiments = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut exp = cfg.clone();
        for (field, value) in &setting {
            apply_search_field(
                &mut exp.search,
                field,
                value,
                &format!("sweep.grid.{field}"),
            )?;
        }
        exp.validate()?;
        experiments.push((setting, exp));
    }

    let grid_keys: Vec<String> = experiments
        .first()
        .map(|(setting, _)| setting.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();

    let mut runs = Vec::with_capacity(experiments.len());
    let mut csv = String::new();
    for key in &grid_keys {
        csv.push_str(&csv_cell(key));
        csv.push(',');
    }
    csv.push_str("accuracy,mean_nfe,reference_nfe,speedup\n");

    for (setting, exp) in experiments {
        let outcome = run_experiment(&exp)?;
        let file = setting_path(base_output, &setting);
        write_results(&file, &outcome)?;
        let reference_nfe = (exp.search.initial_width as f64) * f64::from(exp.search.total_steps);
        let speedup = reference_nfe / outcome.aggregate.mean_nfe;
        for (_, value) in &setting {
            csv.push_str(&csv_cell(&scalar_str(value)));
            csv.push(',');
        }
        csv.push_str(&format!(
            "{},{},{},{}\n",
            outcome.aggregate.mean_accuracy, outcome.aggregate.mean_nfe, reference_nfe, speedup
        ));
        runs.push(SweepRun {
            setting,
            file,
            outcome,
            reference_nfe,
            speedup,
        });
    }
    Ok(SweepOutcome {
        runs,
        summary_csv: csv,
    })
}
