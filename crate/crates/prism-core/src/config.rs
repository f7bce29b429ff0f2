//! Search configuration and its validation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::branching::RemaskPolicy;
use crate::error::Error;
use crate::num;
use crate::state::TokenId;

/// How a masked position is resolved when it gets committed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CommitMode {
    /// Highest-probability token; ties go to the lowest token id.
    Argmax,
    /// Sampled from the temperature-scaled distribution.
    Sample,
}

/// All inputs of the hierarchical trajectory search.
///
/// Steps are indexed by a global countdown `t = total_steps, ..., 1` over the
/// concatenated per-block schedules (`total_steps = blocks × steps_per_block`).
/// The window ratios split that countdown into three stages:
/// exploration for `t > thinning_start()`, thinning down to
/// `refinement_start() + 1`, refinement below.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct HtsConfig {
    /// Exploration width N: trajectories launched at `t = total_steps`.
    pub initial_width: usize,
    /// Survivors S kept as branching seeds at each prune event.
    pub survivors: usize,
    /// Target width K: refinement pool size and the width-decay floor.
    pub target_width: usize,
    /// Lower window ratio; refinement covers `t ≤ ceil(window_min · T)`.
    pub window_min: f64,
    /// Upper window ratio; exploration covers `t > ceil(window_max · T)`.
    pub window_max: f64,
    /// Geometric width-decay rate d (must exceed 1).
    pub decay: f64,
    /// Steps between verifier-guided prune events inside the window.
    pub prune_interval: u32,
    /// Global step count; must equal `blocks × steps_per_block`.
    pub total_steps: u32,
    /// Generation window length (a multiple of `block_size`).
    pub gen_len: usize,
    /// Tokens per generation block.
    pub block_size: usize,
    /// Denoising steps budgeted for each block.
    pub steps_per_block: u32,
    /// Confidence threshold: masked positions whose top temperature-scaled
    /// probability reaches this commit immediately. `1.0` disables threshold
    /// commits (a finite distribution never reaches it); `0.0` commits a
    /// whole block in one step.
    pub commit_threshold: f64,
    /// Softmax temperature applied once and reused for confidence ranking,
    /// sampling, and entropy.
    pub temperature: f64,
    /// How scheduled quota commits pick tokens.
    pub commit_mode: CommitMode,
    /// How completions handed to the verifier are filled in.
    pub svf_completion_mode: CommitMode,
    /// Partial-remask policy used when branching survivors.
    pub remask: RemaskPolicy,
    /// End-of-answer marker token patterns; any match terminates a
    /// trajectory early and pads the remainder with `eos_token`.
    pub markers: Vec<Vec<TokenId>>,
    /// Padding token used when a marker fires.
    pub eos_token: TokenId,
    /// Root seed; every stream in the run derives from it.
    pub seed: u64,
}

impl Default for HtsConfig {
    fn default() -> Self {
        Self {
            initial_width: 16,
            survivors: 2,
            target_width: 8,
            window_min: 0.1,
            window_max: 0.6,
            decay: 1.8,
            prune_interval: 3,
            total_steps: 32,
            gen_len: 32,
            block_size: 8,
            steps_per_block: 8,
            commit_threshold: 0.95,
            temperature: 0.7,
            commit_mode: CommitMode::Sample,
            svf_completion_mode: CommitMode::Argmax,
            remask: RemaskPolicy::default(),
            markers: Vec::new(),
            eos_token: 0,
            seed: 0,
        }
    }
}

/// One validation failure, with the offending field's path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub message: String,
}

impl core::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl HtsConfig {
    /// Number of generation blocks.
    pub fn block_count(&self) -> usize {
        if self.block_size == 0 {
            0
        } else {
            self.gen_len / self.block_size
        }
    }

    /// First thinning step as `t` counts down: `ceil(window_max · T)`.
    pub fn thinning_start(&self) -> u32 {
        ratio_step(self.window_max, self.total_steps)
    }

    /// First refinement step as `t` counts down: `ceil(window_min · T)`.
    pub fn refinement_start(&self) -> u32 {
        ratio_step(self.window_min, self.total_steps)
    }

    /// Collects every domain violation; empty means the config is valid.
    pub fn check(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut issue = |field: &'static str, message: String| {
            issues.push(ConfigIssue { field, message });
        };

        if self.initial_width == 0 {
            issue("initial_width", "must be at least 1".into());
        }
        if self.survivors == 0 || self.survivors > self.initial_width {
            issue(
                "survivors",
                format!(
                    "must satisfy 1 <= survivors <= initial_width ({})",
                    self.initial_width
                ),
            );
        }
        if self.target_width == 0 || self.target_width > self.initial_width {
            issue(
                "target_width",
                format!(
                    "must satisfy 1 <= target_width <= initial_width ({})",
                    self.initial_width
                ),
            );
        }
        for (field, value) in [("window_min", self.window_min), ("window_max", self.window_max)] {
            if !(value > 0.0 && value <= 1.0) {
                issue(field, "must lie in (0, 1]".into());
            }
        }
        if self.window_min > self.window_max {
            issue("window_min", "must not exceed window_max".into());
        }
        if !(self.decay > 1.0) {
            issue("decay", "must be greater than 1".into());
        }
        if self.prune_interval == 0 {
            issue("prune_interval", "must be at least 1".into());
        }
        if self.block_size == 0 {
            issue("block_size", "must be positive".into());
        } else if self.gen_len == 0 || self.gen_len % self.block_size != 0 {
            issue("gen_len", "must be a positive multiple of block_size".into());
        }
        if self.steps_per_block == 0 {
            issue("steps_per_block", "must be positive".into());
        }
        let expected_steps = (self.block_count() as u64) * u64::from(self.steps_per_block);
        if u64::from(self.total_steps) != expected_steps || self.total_steps == 0 {
            issue(
                "total_steps",
                format!("must equal blocks × steps_per_block = {expected_steps}"),
            );
        }
        if !(0.0..=1.0).contains(&self.commit_threshold) {
            issue("commit_threshold", "must lie in [0, 1]".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            issue("temperature", "must be positive and finite".into());
        }
        for i in self.remask.check() {
            issue(i.field, i.message);
        }
        if self.total_steps > 0 && self.thinning_start() > self.total_steps {
            issue("window_max", "window top exceeds total_steps".into());
        }
        issues
    }

    /// Errors with the first violation, if any.
    pub fn validate(&self) -> Result<(), Error> {
        match self.check().into_iter().next() {
            None => Ok(()),
            Some(issue) => Err(Error::InvalidConfig {
                field: issue.field,
                message: issue.message,
            }),
        }
    }
}

fn ratio_step(ratio: f64, total: u32) -> u32 {
    let raw = num::ceil(ratio * total as f64);
    if raw <= 0.0 {
        0
    } else if raw >= total as f64 {
        total
    } else {
        raw as u32
    }
}
