//! Partial-remask local branching.
//!
//! During thinning, a surviving trajectory spawns children by re-opening a
//! small, low-confidence part of what it already committed: one denoiser
//! probe measures per-position entropy, the highest-entropy committed
//! positions form a candidate pool, and a random subset of that pool is
//! reverted to the mask token. The untouched positions act as a skeleton the
//! child keeps verbatim, so children are perturbations of the seed rather
//! than restarts.

use alloc::vec::Vec;

use rand::Rng;

use crate::config::ConfigIssue;
use crate::diffusion::{Conditioning, DenoiserBackend};
use crate::error::Error;
use crate::ledger::{ChargeKind, NfeLedger, Stage};
use crate::num;
use crate::state::SeqState;

/// How the low-confidence candidate pool is selected from the eligible
/// positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PoolRule {
    /// Keep the `ceil(pool_param · n)` highest-entropy positions.
    TopFraction,
    /// Keep every position whose entropy reaches `pool_param`.
    Threshold,
}

/// Controls which committed positions a branch may re-open.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RemaskPolicy {
    pub rule: PoolRule,
    /// Pool size fraction for [`PoolRule::TopFraction`] (in `(0, 1]`), or the
    /// entropy cutoff for [`PoolRule::Threshold`] (non-negative).
    pub pool_param: f64,
    /// Fraction of the pool actually remasked, in `[0, 1]`; the subset size
    /// is `floor(subset_fraction · pool)`.
    pub subset_fraction: f64,
    /// When set, only the active block (or the final block of a finished
    /// sequence) is eligible; earlier, fully decoded blocks are protected.
    pub protect_committed_blocks: bool,
}

impl Default for RemaskPolicy {
    fn default() -> Self {
        Self {
            rule: PoolRule::TopFraction,
            pool_param: 0.25,
            subset_fraction: 0.5,
            protect_committed_blocks: true,
        }
    }
}

impl RemaskPolicy {
    pub fn check(&self) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        match self.rule {
            PoolRule::TopFraction => {
                if !(self.pool_param > 0.0 && self.pool_param <= 1.0) {
                    issues.push(ConfigIssue {
                        field: "remask.pool_param",
                        message: "top-fraction rule needs a value in (0, 1]".into(),
                    });
                }
            }
            PoolRule::Threshold => {
                if !(self.pool_param >= 0.0 && self.pool_param.is_finite()) {
                    issues.push(ConfigIssue {
                        field: "remask.pool_param",
                        message: "threshold rule needs a finite non-negative cutoff".into(),
                    });
                }
            }
        }
        if !(0.0..=1.0).contains(&self.subset_fraction) {
            issues.push(ConfigIssue {
                field: "remask.subset_fraction",
                message: "must lie in [0, 1]".into(),
            });
        }
        issues
    }
}

/// Selects the low-confidence candidate pool.
///
/// `entropies` is indexed by generation row; `eligible` lists the rows the
/// policy allows. The pool is ordered by entropy descending (ties toward the
/// lower row), then truncated per the rule.
pub fn low_conf_pool(
    entropies: &[f64],
    eligible: &[usize],
    policy: &RemaskPolicy,
) -> Result<Vec<usize>, Error> {
    if let Some(issue) = policy.check().into_iter().next() {
        return Err(Error::InvalidConfig {
            field: issue.field,
            message: issue.message,
        });
    }
    if let Some(&bad) = eligible.iter().find(|&&r| r >= entropies.len()) {
        return Err(Error::InvalidArgument {
            what: "eligible",
            message: alloc::format!("row {bad} outside the entropy table"),
        });
    }
    let mut pool: Vec<usize> = eligible.to_vec();
    pool.sort_by(|&a, &b| {
        entropies[b]
            .partial_cmp(&entropies[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    match policy.rule {
        PoolRule::TopFraction => {
            let keep = num::ceil(policy.pool_param * pool.len() as f64) as usize;
            pool.truncate(keep);
        }
        PoolRule::Threshold => {
            pool.retain(|&r| entropies[r] >= policy.pool_param);
        }
    }
    Ok(pool)
}

/// Draws the rows to remask: a uniform sample of `floor(fraction · pool)`
/// pool members without replacement, returned in ascending row order.
pub fn sample_remask_subset(
    pool: &[usize],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, Error> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument {
            what: "fraction",
            message: "must lie in [0, 1]".into(),
        });
    }
    let amount = num::floor(fraction * pool.len() as f64) as usize;
    let mut subset: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    subset.sort_unstable();
    Ok(subset)
}

/// Reverts the given absolute positions to the mask token and re-opens the
/// step budget of any block whose schedule had already closed, so the
/// reverse sampler can decode the holes again. Prompt or out-of-range
/// positions are rejected; everything not listed is preserved verbatim.
pub fn remask(state: &SeqState, positions: &[usize]) -> Result<SeqState, Error> {
    let mut out = state.clone();
    let mut touched_blocks: Vec<usize> = Vec::new();
    for &p in positions {
        out.clear(p)?;
        let block = out.block_of(p).expect("cleared position is in a block");
        if !touched_blocks.contains(&block) {
            touched_blocks.push(block);
        }
    }
    for block in touched_blocks {
        out.grant_reopen_budget(block);
    }
    Ok(out)
}

/// Result of one local-branch call.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutcome {
    pub state: SeqState,
    /// Whether the probe cost one denoiser call.
    pub charged: bool,
    /// Candidate pool, absolute positions.
    pub pool: Vec<usize>,
    /// Positions actually remasked, absolute.
    pub subset: Vec<usize>,
}

/// Spawns one child state from a seed.
///
/// The first child of every seed is the identity: an exact copy, no probe,
/// no charge. Every other child costs exactly one denoiser call to rank the
/// seed's committed positions by entropy, then remasks a sampled subset of
/// the low-confidence pool. Seeds with nothing eligible to re-open (e.g. a
/// block with no commits yet) also return an uncharged copy.
#[allow(clippy::too_many_arguments)]
pub fn local_branch(
    backend: &dyn DenoiserBackend,
    state: &SeqState,
    conditioning: &Conditioning,
    policy: &RemaskPolicy,
    temperature: f64,
    rng: &mut impl Rng,
    ledger: &NfeLedger,
    stage: Stage,
    identity_child: bool,
) -> Result<BranchOutcome, Error> {
    let unchanged = |charged| BranchOutcome {
        state: state.clone(),
        charged,
        pool: Vec::new(),
        subset: Vec::new(),
    };
    if identity_child {
        return Ok(unchanged(false));
    }

    let prompt_len = state.prompt_len();
    let eligible: Vec<usize> = if policy.protect_committed_blocks {
        state
            .block_span(state.branch_block())
            .filter(|&p| state.is_committed(p))
            .map(|p| p - prompt_len)
            .collect()
    } else {
        state
            .gen_range()
            .filter(|&p| state.is_committed(p))
            .map(|p| p - prompt_len)
            .collect()
    };
    if eligible.is_empty() {
        return Ok(unchanged(false));
    }

    // One probe to rank the committed positions by predictive entropy. The
    // block-local noise position conditions the call; a finished sequence is
    // probed at the final step.
    let t = state.noise_position().unwrap_or(1);
    let output = backend.evaluate(state, conditioning, t)?;
    ledger.charge(ChargeKind::Denoise, stage, 1)?;
    let entropies = output.probabilities(temperature)?.entropies();

    let pool_rows = low_conf_pool(&entropies, &eligible, policy)?;
    let subset_rows = sample_remask_subset(&pool_rows, policy.subset_fraction, rng)?;
    let pool: Vec<usize> = pool_rows.iter().map(|r| prompt_len + r).collect();
    let subset: Vec<usize> = subset_rows.iter().map(|r| prompt_len + r).collect();
    let next = remask(state, &subset)?;
    Ok(BranchOutcome {
        state: next,
        charged: true,
        pool,
        subset,
    })
}
