//! Reference decoding strategies the search is benchmarked against:
//! single-trajectory decoding and best-of-N with a configurable selector.
//!
//! Both run the plain block sampler with per-trajectory streams derived the
//! same way the search derives them, so degenerate search configurations can
//! be checked for bit-identical behavior against these references.

use alloc::vec::Vec;

use crate::config::HtsConfig;
use crate::diffusion::{Conditioning, DenoiserBackend, SamplerStep, run_block_sampler};
use crate::error::Error;
use crate::hts::{FinalSelection, HtsDrivers, SelectionContext, SelectionStrategy, select_final};
use crate::ledger::{NfeLedger, Stage};
use crate::rng::{self, lane};
use crate::state::{Token, Trajectory};

/// Deterministic, total rule mapping a completed generation window to the
/// canonical answer that voting and accuracy checks compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AnswerExtractor {
    /// The whole window is the answer (planted tasks).
    FullSequence,
    /// A fixed span of the window, clamped to its bounds.
    Window { start: usize, len: usize },
}

impl AnswerExtractor {
    pub fn extract<'a>(&self, completion: &'a [Token]) -> &'a [Token] {
        match *self {
            AnswerExtractor::FullSequence => completion,
            AnswerExtractor::Window { start, len } => {
                let lo = start.min(completion.len());
                let hi = start.saturating_add(len).min(completion.len());
                &completion[lo..hi]
            }
        }
    }
}

/// Index of the most frequent answer; ties resolve to the earliest ballot of
/// the winning class. Errors on an empty list.
pub fn majority_vote(answers: &[Vec<Token>]) -> Result<usize, Error> {
    if answers.is_empty() {
        return Err(Error::InvalidArgument {
            what: "answers",
            message: "majority vote needs at least one ballot".into(),
        });
    }
    let mut best_idx = 0;
    let mut best_count = 0;
    for (i, answer) in answers.iter().enumerate() {
        let count = answers.iter().filter(|other| *other == answer).count();
        if count > best_count {
            best_idx = i;
            best_count = count;
        }
    }
    Ok(best_idx)
}

/// Result of one plain decoding run.
pub struct SingleRun {
    /// The fully committed generation window.
    pub sequence: Vec<Token>,
    /// Per-step trace (for entropy export).
    pub steps: Vec<SamplerStep>,
    pub terminated_at: Option<u32>,
    pub ledger: NfeLedger,
}

/// Decodes once with the plain block sampler on the stream the search would
/// give its first trajectory, so a width-1 search reproduces this run
/// exactly. Costs at most `total_steps` denoiser calls.
pub fn run_single(
    cfg: &HtsConfig,
    denoiser: &dyn DenoiserBackend,
    conditioning: &Conditioning,
) -> Result<SingleRun, Error> {
    let ledger = NfeLedger::new();
    let mut stream = rng::stream(cfg.seed, &[lane::TRAJECTORY, 0]);
    let outcome = run_block_sampler(
        denoiser,
        conditioning,
        cfg,
        &mut stream,
        &ledger,
        Stage::Standalone,
    )?;
    Ok(SingleRun {
        sequence: outcome.state.gen_tokens().to_vec(),
        steps: outcome.steps,
        terminated_at: outcome.terminated_at,
        ledger,
    })
}

/// Result of a best-of-N run.
pub struct BestOfN {
    pub selection: FinalSelection,
    /// All `n` finished trajectories, lineage ids `0..n`.
    pub pool: Vec<Trajectory>,
    /// Per-run sampler step traces, indexed by lineage id.
    pub runs: Vec<Vec<SamplerStep>>,
    pub ledger: NfeLedger,
}

/// Samples `n` independent trajectories under identical settings (streams
/// keyed by lineage id `0..n`, ignoring `cfg.initial_width`) and collapses
/// them with the chosen selection strategy. Without early termination the
/// denoiser total is exactly `n × total_steps`.
pub fn run_best_of_n(
    cfg: &HtsConfig,
    n: usize,
    drivers: &HtsDrivers<'_>,
    strategy: SelectionStrategy,
) -> Result<BestOfN, Error> {
    if n == 0 {
        return Err(Error::InvalidArgument {
            what: "n",
            message: "best-of-N needs at least one trajectory".into(),
        });
    }
    cfg.validate()?;
    let ledger = NfeLedger::new();
    let mut pool = Vec::with_capacity(n);
    let mut runs = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut stream = rng::stream(cfg.seed, &[lane::TRAJECTORY, i]);
        let outcome = run_block_sampler(
            drivers.denoiser,
            drivers.conditioning,
            cfg,
            &mut stream,
            &ledger,
            Stage::Standalone,
        )?;
        let mut tr = Trajectory::new(i, outcome.state, stream);
        tr.refresh_termination(outcome.terminated_at.unwrap_or(0));
        pool.push(tr);
        runs.push(outcome.steps);
    }
    let ctx = SelectionContext::from_drivers(drivers, &ledger, Stage::Standalone);
    let selection = select_final(&pool, strategy, &ctx)?;
    Ok(BestOfN {
        selection,
        pool,
        runs,
        ledger,
    })
}
