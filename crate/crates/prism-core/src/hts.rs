//! Hierarchical trajectory search.
//!
//! The search spends a fixed global budget of `total_steps` reverse-diffusion
//! steps, indexed by a countdown `t = total_steps, ..., 1`, and splits it into
//! three stages:
//!
//! 1. **Exploration** (`t > thinning_start`): `initial_width` independent
//!    trajectories decode in parallel from the fully masked window; the pool
//!    width stays fixed.
//! 2. **Thinning** (`refinement_start < t ≤ thinning_start`): every
//!    `prune_interval` steps the pool is scored by the verifier, the top
//!    `survivors` trajectories are kept as seeds, and each seed spawns
//!    children by partial-remask branching until the pool matches the width
//!    schedule [`width_at`] — a geometric decay from `initial_width` floored
//!    at `target_width`. Between prune events the pool decodes unchanged.
//! 3. **Refinement** (`t ≤ refinement_start`): the pool is cut to exactly
//!    `target_width` and decoded to completion, stopping early once every
//!    survivor is fully committed (or an answer marker fired).
//!
//! Every denoiser and verifier call is charged to the run's [`NfeLedger`];
//! [`predicted_cost`] reproduces the denoiser total analytically from the
//! recorded pool widths, so instrumented runs can be audited against the
//! closed-form cost model
//!
//! ```text
//! C = N·(T − T_p)  +  Σ_{T_r < t ≤ T_p} |P_t|  +  K·T_r
//! ```
//!
//! plus the separately reported branch-probe calls.

use alloc::vec::Vec;

use crate::baselines::{AnswerExtractor, majority_vote};
use crate::branching::local_branch;
use crate::config::{CommitMode, HtsConfig};
use crate::diffusion::{
    Conditioning, DenoiserBackend, denoise_step, early_terminate_check, sample_token,
};
use crate::error::Error;
use crate::ledger::{NfeLedger, Stage};
use crate::num;
use crate::rng::{self, lane};
use crate::state::{SeqState, Token, Trajectory};
use crate::svf::{SvfScore, VerifierBackend, VerifyPromptTemplate, svf_due, svf_eval};

/// Which of the three search stages a countdown step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StageId {
    Exploration,
    Thinning,
    Refinement,
}

impl StageId {
    /// The ledger stage charges at this search stage are attributed to.
    pub fn ledger_stage(self) -> Stage {
        match self {
            StageId::Exploration => Stage::Exploration,
            StageId::Thinning => Stage::Thinning,
            StageId::Refinement => Stage::Refinement,
        }
    }
}

/// Maps a countdown step to its stage.
///
/// `top` and `floor` are the window pivots (`thinning_start` and
/// `refinement_start`): exploration covers `t > top`, thinning covers
/// `floor < t ≤ top`, refinement covers `t ≤ floor`. The pivots must satisfy
/// `1 ≤ floor ≤ top ≤ total`; `floor == top` means an empty thinning window.
/// Errors when `t` lies outside `[1, total]`.
pub fn stage_of(t: u32, total: u32, top: u32, floor: u32) -> Result<StageId, Error> {
    if !(1..=total).contains(&t) {
        return Err(Error::InvalidArgument {
            what: "t",
            message: alloc::format!("step {t} outside the countdown range [1, {total}]"),
        });
    }
    if floor == 0 || floor > top || top > total {
        return Err(Error::InvalidArgument {
            what: "window",
            message: alloc::format!("pivots must satisfy 1 <= {floor} <= {top} <= {total}"),
        });
    }
    Ok(if t > top {
        StageId::Exploration
    } else if t > floor {
        StageId::Thinning
    } else {
        StageId::Refinement
    })
}

/// Width schedule: the pool size the search aims for at countdown step `t`.
///
/// Decays geometrically from `n` as the countdown passes the thinning pivot,
/// floored at `k`:
///
/// ```text
/// W_t = max(⌊n / decay^(top − t)⌋, k)
/// ```
///
/// The power accumulates by repeated multiplication and the quotient rounds
/// once, so the floor is stable even when `n / decay^(top − t)` lands on an
/// exact integer. Requires `decay > 1` and `t ≤ top`.
pub fn width_at(n: usize, decay: f64, k: usize, top: u32, t: u32) -> usize {
    assert!(decay > 1.0, "width decay must exceed 1");
    assert!(t <= top, "width schedule is defined at or below the pivot");
    let mut power = 1.0_f64;
    for _ in 0..(top - t) {
        power *= decay;
    }
    let raw = num::floor(n as f64 / power) as usize;
    raw.max(k)
}

/// Children per seed at a prune event: `⌈w_next / survivors⌉`.
///
/// The caller stops spawning once the pool reaches `w_next`, so the last
/// seed may contribute fewer children than the factor suggests.
pub fn branch_factor(w_next: usize, survivors: usize) -> usize {
    assert!(w_next >= 1, "target width must be positive");
    assert!(survivors >= 1, "survivor count must be positive");
    num::div_ceil(w_next, survivors)
}

/// Per-step trace entry.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    /// Countdown step.
    pub t: u32,
    pub stage: StageId,
    /// Pool size when the step's denoising ran (post-prune at prune steps).
    pub width: usize,
    /// How many pool members actually consumed a denoiser call at this step
    /// (completed trajectories are skipped for free).
    pub denoised: usize,
    /// Mean of the denoised trajectories' mean entropies; `None` when the
    /// whole pool was already complete.
    pub mean_entropy: Option<f64>,
    /// Lineage ids dropped at this step, by pruning or the refinement cut.
    pub pruned: Vec<u64>,
}

/// Everything that happened at one verifier-guided prune event.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PruneRecord {
    /// Countdown step of the event.
    pub t: u32,
    /// Pool size the event produced (the width schedule at `t − 1`).
    pub target_width: usize,
    /// Children spawned per seed before truncation.
    pub branch_factor: usize,
    /// `(lineage, score)` of every parent, in pool order.
    pub scores: Vec<(u64, f64)>,
    /// Seeds actually branched, best score first.
    pub seeds: Vec<u64>,
    /// The post-event pool, in pool order (each seed precedes its children).
    pub children: Vec<u64>,
    /// Parents dropped by the event.
    pub pruned: Vec<u64>,
}

/// One `(trajectory, step)` entropy sample for trace export.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EntropyPoint {
    pub trajectory: u64,
    pub t: u32,
    pub mean_entropy: f64,
}

/// Full instrumentation of one search run.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    pub prunes: Vec<PruneRecord>,
    /// One point per charged denoise step of every trajectory.
    pub entropy: Vec<EntropyPoint>,
    /// `(lineage, t)`: the step at which each dropped trajectory left the
    /// pool. Its entropy points all lie at steps strictly above `t`.
    pub pruned_at: Vec<(u64, u32)>,
    /// `(lineage, t)`: the step at which a trajectory finished decoding.
    pub terminated_at: Vec<(u64, u32)>,
    /// Denoiser calls spent probing seeds while branching; reported apart
    /// from the staged decoding cost.
    pub branch_probe_nfe: u64,
    /// Lineage ids alive when the search ended, in pool order.
    pub final_pool: Vec<u64>,
}

impl RunTrace {
    /// `(t, pool width)` pairs for the cost model, one per executed step.
    pub fn widths(&self) -> Vec<(u32, usize)> {
        self.steps.iter().map(|s| (s.t, s.width)).collect()
    }
}

/// The backends and task context a search run needs.
pub struct HtsDrivers<'a> {
    pub denoiser: &'a dyn DenoiserBackend,
    pub verifier: &'a dyn VerifierBackend,
    /// Judge wording used for every verification prompt.
    pub template: &'a VerifyPromptTemplate,
    /// Conditioning forwarded to the denoiser with every call.
    pub conditioning: &'a Conditioning,
    /// Problem statement inserted into verification prompts.
    pub problem: &'a str,
    /// Canonicalization used by majority voting.
    pub extractor: AnswerExtractor,
    /// Ground-truth checker, when the task has one; enables the executor
    /// selection strategy.
    pub executor: Option<&'a dyn Fn(&[Token]) -> bool>,
}

/// How the final pool is collapsed to one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SelectionStrategy {
    /// Fresh verifier score per candidate; argmax, ties to the lowest
    /// lineage id.
    Svf,
    /// Most frequent extracted answer; ties to the first seen in lineage
    /// order.
    Majority,
    /// First candidate (in lineage order) passing the task checker; falls
    /// back to the verifier score when none passes.
    Executor,
}

/// Everything [`select_final`] needs besides the pool.
pub struct SelectionContext<'a> {
    pub verifier: &'a dyn VerifierBackend,
    pub template: &'a VerifyPromptTemplate,
    pub problem: &'a str,
    pub extractor: AnswerExtractor,
    pub executor: Option<&'a dyn Fn(&[Token]) -> bool>,
    pub ledger: &'a NfeLedger,
    /// Stage the selection's verifier calls are charged to.
    pub stage: Stage,
}

impl<'a> SelectionContext<'a> {
    pub fn from_drivers(drivers: &'a HtsDrivers<'a>, ledger: &'a NfeLedger, stage: Stage) -> Self {
        Self {
            verifier: drivers.verifier,
            template: drivers.template,
            problem: drivers.problem,
            extractor: drivers.extractor,
            executor: drivers.executor,
            ledger,
            stage,
        }
    }
}

/// The chosen answer and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalSelection {
    /// Index into the pool as passed to [`select_final`].
    pub index: usize,
    /// Lineage id of the chosen trajectory.
    pub lineage: u64,
    /// The chosen generation window, fully committed.
    pub sequence: Vec<Token>,
}

/// Result of a completed search run.
#[derive(Debug)]
pub struct HtsOutcome {
    pub selection: FinalSelection,
    /// The surviving pool (the selection's `index` points into it).
    pub pool: Vec<Trajectory>,
    pub ledger: NfeLedger,
    pub trace: RunTrace,
}

/// A run that died mid-flight: the error plus whatever accounting and trace
/// had accumulated, so partial results stay inspectable.
#[derive(Debug)]
pub struct HtsAbort {
    pub error: Error,
    pub ledger: NfeLedger,
    pub trace: RunTrace,
}

impl core::fmt::Display for HtsAbort {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "search aborted: {}", self.error)
    }
}

impl From<HtsAbort> for Error {
    fn from(abort: HtsAbort) -> Self {
        abort.error
    }
}

/// Analytic denoiser-call breakdown of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostBreakdown {
    /// `initial_width · (total − thinning_start)`.
    pub exploration: u64,
    /// Sum of recorded pool widths over the thinning window.
    pub thinning: u64,
    /// `target_width · refinement_start`.
    pub refinement: u64,
    /// The near-linear scaling estimate `initial_width + target_width · total`.
    pub near_linear: u64,
}

impl CostBreakdown {
    /// Total staged decoding cost (branch probes are accounted separately).
    pub fn search_total(&self) -> u64 {
        self.exploration + self.thinning + self.refinement
    }
}

/// Evaluates the cost model on recorded pool widths.
///
/// `widths` must contain one `(t, |P_t|)` entry per executed thinning step;
/// entries outside the thinning window are ignored. In the exact regime (no
/// threshold commits, no markers, and `block_size >= steps_per_block` so the
/// per-step quota cannot close a block ahead of its budget) the ledger's
/// denoiser total equals `search_total() + branch probes` to the unit; early
/// termination only ever makes the real run cheaper than the model.
pub fn predicted_cost(cfg: &HtsConfig, widths: &[(u32, usize)]) -> CostBreakdown {
    let top = cfg.thinning_start();
    let floor = cfg.refinement_start();
    let thinning = widths
        .iter()
        .filter(|&&(t, _)| t > floor && t <= top)
        .map(|&(_, w)| w as u64)
        .sum();
    CostBreakdown {
        exploration: cfg.initial_width as u64 * u64::from(cfg.total_steps - top),
        thinning,
        refinement: cfg.target_width as u64 * u64::from(floor),
        near_linear: cfg.initial_width as u64
            + cfg.target_width as u64 * u64::from(cfg.total_steps),
    }
}

/// The completion handed to the verifier for an in-flight trajectory.
///
/// A finished trajectory is verified verbatim. An unfinished one reuses its
/// cached last prediction: argmax mode takes the cached fill directly, sample
/// mode redraws the still-masked positions from the cached distributions on a
/// dedicated stream keyed by `(lineage, step)` — never the trajectory's own
/// decode stream. Returns `None` when the trajectory was never denoised.
fn verification_completion(tr: &Trajectory, cfg: &HtsConfig, t: u32) -> Option<Vec<Token>> {
    if tr.state.is_complete() {
        return Some(tr.state.gen_tokens().to_vec());
    }
    match cfg.svf_completion_mode {
        CommitMode::Argmax => tr.completion(),
        CommitMode::Sample => {
            let probs = tr.last_probs()?;
            let mut draw = rng::stream(
                cfg.seed,
                &[lane::SVF_COMPLETION, tr.id, u64::from(t)],
            );
            let mut out = Vec::with_capacity(tr.state.gen_len());
            for (r, &tok) in tr.state.gen_tokens().iter().enumerate() {
                out.push(match tok {
                    Token::Mask => {
                        Token::Id(sample_token(probs.row(r), &mut draw).ok()?)
                    }
                    committed => committed,
                });
            }
            Some(out)
        }
    }
}

/// Scores one trajectory at a prune event and caches the score on it.
///
/// Charges one verifier call unless there is nothing to verify yet (no
/// cached prediction), in which case the neutral score is used for free.
fn score_trajectory(
    tr: &mut Trajectory,
    drivers: &HtsDrivers<'_>,
    cfg: &HtsConfig,
    t: u32,
    ledger: &NfeLedger,
) -> Result<SvfScore, Error> {
    let score = match verification_completion(tr, cfg, t) {
        None => SvfScore::NEUTRAL,
        Some(completion) => svf_eval(
            drivers.verifier,
            drivers.template,
            drivers.problem,
            &completion,
            ledger,
            Stage::Thinning,
        )?,
    };
    tr.last_svf = Some(score);
    Ok(score)
}

/// Collapses a pool of finished trajectories to one answer.
///
/// Candidates are always considered in lineage-id order, so the result is
/// invariant under pool permutations. Every trajectory must be fully
/// committed; the pool must be non-empty. The svf strategy (and the executor
/// fallback) charges one verifier call per candidate.
pub fn select_final(
    pool: &[Trajectory],
    strategy: SelectionStrategy,
    ctx: &SelectionContext<'_>,
) -> Result<FinalSelection, Error> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument {
            what: "pool",
            message: "final selection needs at least one trajectory".into(),
        });
    }
    if let Some(tr) = pool.iter().find(|tr| !tr.state.is_complete()) {
        return Err(Error::InvalidArgument {
            what: "pool",
            message: alloc::format!("trajectory {} is not fully decoded", tr.id),
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by_key(|&i| pool[i].id);

    let pick = |i: usize| FinalSelection {
        index: i,
        lineage: pool[i].id,
        sequence: pool[i].state.gen_tokens().to_vec(),
    };

    match strategy {
        SelectionStrategy::Svf => Ok(pick(select_by_svf(pool, &order, ctx)?)),
        SelectionStrategy::Majority => {
            let answers: Vec<Vec<Token>> = order
                .iter()
                .map(|&i| ctx.extractor.extract(pool[i].state.gen_tokens()).to_vec())
                .collect();
            let winner = majority_vote(&answers)?;
            Ok(pick(order[winner]))
        }
        SelectionStrategy::Executor => {
            let Some(check) = ctx.executor else {
                return Err(Error::InvalidArgument {
                    what: "executor",
                    message: "executor selection needs a task checker".into(),
                });
            };
            for &i in &order {
                if check(pool[i].state.gen_tokens()) {
                    return Ok(pick(i));
                }
            }
            Ok(pick(select_by_svf(pool, &order, ctx)?))
        }
    }
}

/// Fresh verifier scores over `order`; argmax with strict improvement, so
/// ties keep the earliest (lowest-lineage) candidate.
fn select_by_svf(
    pool: &[Trajectory],
    order: &[usize],
    ctx: &SelectionContext<'_>,
) -> Result<usize, Error> {
    let mut best: Option<(usize, f64)> = None;
    for &i in order {
        let score = svf_eval(
            ctx.verifier,
            ctx.template,
            ctx.problem,
            pool[i].state.gen_tokens(),
            ctx.ledger,
            ctx.stage,
        )?;
        if best.is_none_or(|(_, b)| score.value > b) {
            best = Some((i, score.value));
        }
    }
    Ok(best.expect("pool is non-empty").0)
}

/// Runs the full three-stage search and returns the selected answer, the
/// surviving pool, the exact call ledger, and the step-by-step trace.
///
/// Verifier failures degrade to neutral scores and the search continues; a
/// denoiser failure aborts with the partial trace and ledger.
pub fn run_hts(
    cfg: &HtsConfig,
    drivers: &HtsDrivers<'_>,
    strategy: SelectionStrategy,
) -> Result<HtsOutcome, HtsAbort> {
    let mut search = match Search::new(cfg, drivers) {
        Ok(search) => search,
        Err(error) => {
            return Err(HtsAbort {
                error,
                ledger: NfeLedger::new(),
                trace: RunTrace::default(),
            });
        }
    };
    match search.run(strategy) {
        Ok(selection) => Ok(HtsOutcome {
            selection,
            pool: search.pool,
            ledger: search.ledger,
            trace: search.trace,
        }),
        Err(error) => Err(HtsAbort {
            error,
            ledger: search.ledger,
            trace: search.trace,
        }),
    }
}

struct Search<'a> {
    cfg: &'a HtsConfig,
    drivers: &'a HtsDrivers<'a>,
    ledger: NfeLedger,
    trace: RunTrace,
    pool: Vec<Trajectory>,
    next_id: u64,
    top: u32,
    floor: u32,
}

impl<'a> Search<'a> {
    fn new(cfg: &'a HtsConfig, drivers: &'a HtsDrivers<'a>) -> Result<Self, Error> {
        cfg.validate()?;
        let mut pool = Vec::with_capacity(cfg.initial_width);
        for i in 0..cfg.initial_width as u64 {
            let state = SeqState::new(&[], cfg.gen_len, cfg.block_size, cfg.steps_per_block)?;
            pool.push(Trajectory::new(
                i,
                state,
                rng::stream(cfg.seed, &[lane::TRAJECTORY, i]),
            ));
        }
        Ok(Self {
            cfg,
            drivers,
            ledger: NfeLedger::new(),
            trace: RunTrace::default(),
            pool,
            next_id: cfg.initial_width as u64,
            top: cfg.thinning_start(),
            floor: cfg.refinement_start(),
        })
    }

    fn run(&mut self, strategy: SelectionStrategy) -> Result<FinalSelection, Error> {
        for t in (1..=self.cfg.total_steps).rev() {
            let stage = stage_of(t, self.cfg.total_steps, self.top, self.floor)?;
            let mut pruned_here = Vec::new();
            if stage == StageId::Thinning
                && svf_due(t, self.top, self.floor, self.cfg.prune_interval)?
            {
                pruned_here = self.prune(t)?;
            }
            if t == self.floor {
                pruned_here.extend(self.cut_to_target(t));
            }
            let (denoised, mean_entropy) = self.denoise_pool(t, stage.ledger_stage())?;
            self.trace.steps.push(StepRecord {
                t,
                stage,
                width: self.pool.len(),
                denoised,
                mean_entropy,
                pruned: pruned_here,
            });
            if stage == StageId::Refinement && self.all_complete() {
                break;
            }
        }
        self.flush()?;
        self.trace.final_pool = self.pool.iter().map(|tr| tr.id).collect();
        let ctx = SelectionContext::from_drivers(self.drivers, &self.ledger, Stage::Refinement);
        select_final(&self.pool, strategy, &ctx)
    }

    fn all_complete(&self) -> bool {
        self.pool.iter().all(|tr| tr.state.is_complete())
    }

    /// One denoise step for every unfinished pool member; markers are checked
    /// after each commit. Returns the charged count and the mean entropy.
    fn denoise_pool(&mut self, t: u32, stage: Stage) -> Result<(usize, Option<f64>), Error> {
        let mut denoised = 0usize;
        let mut entropy_sum = 0.0;
        for tr in &mut self.pool {
            if !tr.state.is_complete() {
                let (state, stream) = tr.decode_parts();
                let outcome = denoise_step(
                    self.drivers.denoiser,
                    state,
                    self.drivers.conditioning,
                    self.cfg,
                    stream,
                    &self.ledger,
                    stage,
                )?;
                tr.state = outcome.state;
                let (after, _fired) =
                    early_terminate_check(&tr.state, &self.cfg.markers, self.cfg.eos_token);
                tr.state = after;
                if let Some(eval) = outcome.eval {
                    denoised += 1;
                    entropy_sum += eval.mean_entropy;
                    self.trace.entropy.push(EntropyPoint {
                        trajectory: tr.id,
                        t,
                        mean_entropy: eval.mean_entropy,
                    });
                    tr.cache_step(eval.completion, eval.probs, eval.mean_entropy);
                }
            }
            tr.refresh_termination(t);
            if tr.terminated_at == Some(t) {
                self.trace.terminated_at.push((tr.id, t));
            }
        }
        let mean = (denoised > 0).then(|| entropy_sum / denoised as f64);
        Ok((denoised, mean))
    }

    /// One verifier-guided prune event: score every parent once, keep the
    /// top `survivors` as seeds, branch each seed (identity child first)
    /// until the pool matches the width schedule at `t − 1`, and drop the
    /// rest. Returns the dropped lineage ids.
    fn prune(&mut self, t: u32) -> Result<Vec<u64>, Error> {
        let mut scores = Vec::with_capacity(self.pool.len());
        for tr in &mut self.pool {
            let score = score_trajectory(tr, self.drivers, self.cfg, t, &self.ledger)?;
            scores.push(score.value);
        }
        let recorded: Vec<(u64, f64)> = self
            .pool
            .iter()
            .zip(&scores)
            .map(|(tr, &s)| (tr.id, s))
            .collect();

        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(self.pool[a].id.cmp(&self.pool[b].id))
        });

        let m_next = width_at(
            self.cfg.initial_width,
            self.cfg.decay,
            self.cfg.target_width,
            self.top,
            t - 1,
        );
        let b_t = branch_factor(m_next, self.cfg.survivors);
        let seed_count = self.cfg.survivors.min(self.pool.len());

        let mut slots: Vec<Option<Trajectory>> = self.pool.drain(..).map(Some).collect();
        let mut children: Vec<Trajectory> = Vec::with_capacity(m_next);
        let mut seed_ids = Vec::with_capacity(seed_count);
        for &si in &order[..seed_count] {
            if children.len() == m_next {
                break;
            }
            let seed = slots[si].take().expect("each seed is taken once");
            seed_ids.push(seed.id);
            let room = m_next - children.len();
            let fanout = b_t.min(room);
            let mut siblings = Vec::with_capacity(fanout.saturating_sub(1));
            for _ in 1..fanout {
                let id = self.next_id;
                self.next_id += 1;
                let mut child_rng = rng::stream(self.cfg.seed, &[lane::TRAJECTORY, id]);
                let branched = local_branch(
                    self.drivers.denoiser,
                    &seed.state,
                    self.drivers.conditioning,
                    &self.cfg.remask,
                    self.cfg.temperature,
                    &mut child_rng,
                    &self.ledger,
                    Stage::Thinning,
                    false,
                )?;
                if branched.charged {
                    self.trace.branch_probe_nfe += 1;
                }
                siblings.push(Trajectory::child(id, &seed, branched.state, child_rng));
            }
            // The identity child is the seed itself, moved: same lineage id,
            // same stream, same cached prediction. The best parent therefore
            // always survives a prune event untouched.
            children.push(seed);
            children.append(&mut siblings);
        }
        if children.len() != m_next {
            return Err(Error::Internal(alloc::format!(
                "prune produced {} children, schedule wants {m_next}",
                children.len()
            )));
        }

        let pruned: Vec<u64> = slots.iter().flatten().map(|tr| tr.id).collect();
        for &id in &pruned {
            self.trace.pruned_at.push((id, t));
        }
        self.trace.prunes.push(PruneRecord {
            t,
            target_width: m_next,
            branch_factor: b_t,
            scores: recorded,
            seeds: seed_ids,
            children: children.iter().map(|tr| tr.id).collect(),
            pruned: pruned.clone(),
        });
        self.pool = children;
        Ok(pruned)
    }

    /// Cuts the pool to `target_width` at the refinement boundary, keeping
    /// the best last-known verifier scores (never-scored trajectories count
    /// as neutral 0.5; ties keep the lower lineage id).
    fn cut_to_target(&mut self, t: u32) -> Vec<u64> {
        let k = self.cfg.target_width;
        if self.pool.len() <= k {
            return Vec::new();
        }
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.sort_by(|&a, &b| {
            let sa = self.pool[a].last_svf.map_or(0.5, |s| s.value);
            let sb = self.pool[b].last_svf.map_or(0.5, |s| s.value);
            sb.partial_cmp(&sa)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(self.pool[a].id.cmp(&self.pool[b].id))
        });
        let mut slots: Vec<Option<Trajectory>> = self.pool.drain(..).map(Some).collect();
        let mut kept = Vec::with_capacity(k);
        for &i in &order[..k] {
            kept.push(slots[i].take().expect("each survivor is taken once"));
        }
        let pruned: Vec<u64> = slots.iter().flatten().map(|tr| tr.id).collect();
        for &id in &pruned {
            self.trace.pruned_at.push((id, t));
        }
        self.pool = kept;
        pruned
    }

    /// Defensive tail: with pathological remask settings a child re-opened
    /// across several blocks near `t = 1` could run out of scheduled steps.
    /// Finish any such stragglers (charged to refinement, outside the trace)
    /// rather than hand an incomplete pool to selection.
    fn flush(&mut self) -> Result<(), Error> {
        let mut rounds = 0u32;
        while !self.all_complete() {
            if rounds >= self.cfg.total_steps {
                return Err(Error::Internal(
                    "pool failed to complete within the flush budget".into(),
                ));
            }
            rounds += 1;
            for tr in &mut self.pool {
                if tr.state.is_complete() {
                    continue;
                }
                let (state, stream) = tr.decode_parts();
                let outcome = denoise_step(
                    self.drivers.denoiser,
                    state,
                    self.drivers.conditioning,
                    self.cfg,
                    stream,
                    &self.ledger,
                    Stage::Refinement,
                )?;
                tr.state = outcome.state;
                tr.refresh_termination(0);
                if tr.terminated_at == Some(0) {
                    self.trace.terminated_at.push((tr.id, 0));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::run_block_sampler;
    use crate::error::BackendError;
    use crate::sim::{SimDenoiser, SimVerifier, SimVerifierParams, executor_check, make_planted_task};
    use crate::state::TokenId;
    use crate::svf::{JudgeResponse, VerifyRequest};

    #[test]
    fn stages_partition_the_countdown() {
        // T = 32 with window ratios [0.1, 0.6] pivots at 20 and 4.
        let cfg = HtsConfig::default();
        let (top, floor) = (cfg.thinning_start(), cfg.refinement_start());
        assert_eq!((top, floor), (20, 4));
        assert_eq!(stage_of(25, 32, top, floor).unwrap(), StageId::Exploration);
        assert_eq!(stage_of(21, 32, top, floor).unwrap(), StageId::Exploration);
        assert_eq!(stage_of(20, 32, top, floor).unwrap(), StageId::Thinning);
        assert_eq!(stage_of(10, 32, top, floor).unwrap(), StageId::Thinning);
        assert_eq!(stage_of(5, 32, top, floor).unwrap(), StageId::Thinning);
        assert_eq!(stage_of(4, 32, top, floor).unwrap(), StageId::Refinement);
        assert_eq!(stage_of(1, 32, top, floor).unwrap(), StageId::Refinement);
        assert!(stage_of(0, 32, top, floor).is_err());
        assert!(stage_of(33, 32, top, floor).is_err());
        // An empty thinning window is legal: the countdown skips the stage.
        assert_eq!(stage_of(16, 32, 16, 16).unwrap(), StageId::Refinement);
        assert_eq!(stage_of(17, 32, 16, 16).unwrap(), StageId::Exploration);
        assert!(stage_of(5, 32, 4, 20).is_err());
    }

    #[test]
    fn width_decays_geometrically_with_a_floor() {
        let top = 20;
        assert_eq!(width_at(16, 1.8, 2, top, top), 16);
        assert_eq!(width_at(16, 1.8, 2, top, top - 1), 8); // ⌊8.888⌋
        assert_eq!(width_at(16, 1.8, 2, top, top - 2), 4); // ⌊4.938⌋
        assert_eq!(width_at(16, 1.8, 2, top, top - 3), 2); // ⌊2.743⌋
        assert_eq!(width_at(16, 1.8, 4, top, top - 3), 4); // floored at k
        assert_eq!(width_at(16, 1.8, 2, top, 1), 2);

        let mut last = usize::MAX;
        for t in (1..=top).rev() {
            let w = width_at(16, 1.8, 2, top, t);
            assert!(w <= last, "width must never grow as t falls");
            assert!(w >= 2, "width must never fall below the floor");
            last = w;
        }
    }

    #[test]
    fn branch_factor_is_a_ceiling_division() {
        assert_eq!(branch_factor(8, 4), 2);
        assert_eq!(branch_factor(7, 4), 2);
        assert_eq!(branch_factor(1, 4), 1);
        assert_eq!(branch_factor(8, 2), 4);
        assert_eq!(branch_factor(3, 2), 2);
        assert_eq!(branch_factor(16, 16), 1);
    }

    #[test]
    fn cost_model_matches_hand_arithmetic() {
        // Zero-length thinning window: only the outer terms remain.
        let cfg = HtsConfig {
            initial_width: 4,
            survivors: 4,
            target_width: 2,
            window_min: 0.5,
            window_max: 0.5,
            ..HtsConfig::default()
        };
        let cost = predicted_cost(&cfg, &[]);
        assert_eq!(cost.exploration, 4 * 16);
        assert_eq!(cost.thinning, 0);
        assert_eq!(cost.refinement, 2 * 16);
        assert_eq!(cost.search_total(), 96);
        assert_eq!(cost.near_linear, 4 + 2 * 32);

        // Constant width N over every step collapses to the linear-search
        // cost N·T.
        let cfg = HtsConfig {
            initial_width: 4,
            survivors: 4,
            target_width: 4,
            window_min: 0.25,
            window_max: 1.0,
            ..HtsConfig::default()
        };
        let widths: Vec<(u32, usize)> = (1..=32).map(|t| (t, 4)).collect();
        let cost = predicted_cost(&cfg, &widths);
        assert_eq!(cost.exploration, 0);
        assert_eq!(cost.thinning, 4 * 24);
        assert_eq!(cost.refinement, 4 * 8);
        assert_eq!(cost.search_total(), 4 * 32);
    }

    /// Task + backends bundle so tests can hold everything by reference.
    struct Rig {
        task: crate::sim::PlantedTask,
        denoiser: SimDenoiser,
        verifier: SimVerifier,
        template: VerifyPromptTemplate,
        conditioning: Conditioning,
        problem: alloc::string::String,
    }

    impl Rig {
        fn new(seed: u64, gen_len: usize, vocab: usize, gap: f64) -> Self {
            let task = make_planted_task(seed, 0, gen_len, vocab, 2, 1.2).unwrap();
            let denoiser = SimDenoiser::new(task.clone());
            let verifier = SimVerifier {
                task: task.clone(),
                params: SimVerifierParams {
                    gap,
                    noise_sd: 0.5,
                    flip_rate: 0.0,
                },
                seed,
            };
            let conditioning = task.conditioning();
            let problem = task.problem_text();
            Self {
                task,
                denoiser,
                verifier,
                template: VerifyPromptTemplate::math_default(),
                conditioning,
                problem,
            }
        }

        fn drivers(&self) -> HtsDrivers<'_> {
            HtsDrivers {
                denoiser: &self.denoiser,
                verifier: &self.verifier,
                template: &self.template,
                conditioning: &self.conditioning,
                problem: &self.problem,
                extractor: AnswerExtractor::FullSequence,
                executor: None,
            }
        }
    }

    fn search_cfg(seed: u64) -> HtsConfig {
        HtsConfig {
            initial_width: 8,
            survivors: 2,
            target_width: 4,
            gen_len: 16,
            block_size: 4,
            steps_per_block: 4,
            total_steps: 16,
            commit_threshold: 1.0,
            temperature: 0.8,
            seed,
            ..HtsConfig::default()
        }
    }

    #[test]
    fn search_obeys_schedule_ledger_and_termination() {
        let rig = Rig::new(41, 16, 16, 4.0);
        let cfg = search_cfg(41);
        let outcome = run_hts(&cfg, &rig.drivers(), SelectionStrategy::Svf).unwrap();

        // Every survivor decoded fully and the pool was cut to K.
        assert_eq!(outcome.pool.len(), cfg.target_width);
        assert!(outcome.pool.iter().all(|tr| tr.state.is_complete()));
        assert_eq!(outcome.trace.final_pool.len(), cfg.target_width);

        // The denoiser total matches the closed-form cost model exactly:
        // tau = 1.0 and no markers means no early termination anywhere.
        let cost = predicted_cost(&cfg, &outcome.trace.widths());
        assert_eq!(
            outcome.ledger.denoise_total(),
            cost.search_total() + outcome.trace.branch_probe_nfe
        );
        assert!(outcome.ledger.snapshot().is_consistent());

        // Stage attribution matches the analytic terms.
        let (explore_d, _) = outcome.ledger.stage_counts(Stage::Exploration);
        let (thin_d, thin_s) = outcome.ledger.stage_counts(Stage::Thinning);
        let (refine_d, refine_s) = outcome.ledger.stage_counts(Stage::Refinement);
        assert_eq!(explore_d, cost.exploration);
        assert_eq!(thin_d, cost.thinning + outcome.trace.branch_probe_nfe);
        assert_eq!(refine_d, cost.refinement);
        // Prune events scored every parent; final selection scored the pool.
        let scored: u64 = outcome
            .trace
            .prunes
            .iter()
            .map(|p| p.scores.len() as u64)
            .sum();
        assert_eq!(thin_s, scored);
        assert_eq!(refine_s, cfg.target_width as u64);

        // Width schedule: each prune event hits the decayed width exactly,
        // and widths never grow between events.
        let top = cfg.thinning_start();
        for prune in &outcome.trace.prunes {
            let expect = width_at(
                cfg.initial_width,
                cfg.decay,
                cfg.target_width,
                top,
                prune.t - 1,
            );
            assert_eq!(prune.target_width, expect);
            assert_eq!(prune.children.len(), expect);
        }
        let mut last = usize::MAX;
        for step in &outcome.trace.steps {
            assert!(step.width <= last);
            last = step.width;
            if step.stage == StageId::Exploration {
                assert_eq!(step.width, cfg.initial_width);
            }
            if step.stage == StageId::Refinement {
                assert_eq!(step.width, cfg.target_width);
            }
        }

        // Elite survival: the best-scored parent of every event is a seed
        // and survives into the event's pool under its own lineage id.
        for prune in &outcome.trace.prunes {
            let best = prune
                .scores
                .iter()
                .fold(None::<(u64, f64)>, |acc, &(id, s)| match acc {
                    Some((bid, bs)) if s > bs || (s == bs && id < bid) => Some((id, s)),
                    None => Some((id, s)),
                    keep => keep,
                })
                .unwrap()
                .0;
            assert_eq!(prune.seeds[0], best);
            assert!(prune.children.contains(&best));
        }

        // Pruned trajectories never reappear, and their entropy traces stop
        // strictly above the prune step.
        for &(id, t) in &outcome.trace.pruned_at {
            assert!(!outcome.trace.final_pool.contains(&id));
            for point in outcome.trace.entropy.iter().filter(|p| p.trajectory == id) {
                assert!(point.t > t);
            }
        }

        // Identical config and seed reproduce everything bit for bit.
        let again = run_hts(&cfg, &rig.drivers(), SelectionStrategy::Svf).unwrap();
        assert_eq!(again.selection, outcome.selection);
        assert_eq!(again.trace, outcome.trace);
        assert_eq!(again.ledger.snapshot(), outcome.ledger.snapshot());
    }

    #[test]
    fn single_trajectory_search_is_the_plain_sampler() {
        let rig = Rig::new(17, 16, 16, 4.0);
        let cfg = HtsConfig {
            initial_width: 1,
            survivors: 1,
            target_width: 1,
            ..search_cfg(17)
        };
        let outcome = run_hts(&cfg, &rig.drivers(), SelectionStrategy::Svf).unwrap();

        let ledger = NfeLedger::new();
        let mut stream = rng::stream(cfg.seed, &[lane::TRAJECTORY, 0]);
        let sampled = run_block_sampler(
            &rig.denoiser,
            &rig.conditioning,
            &cfg,
            &mut stream,
            &ledger,
            Stage::Standalone,
        )
        .unwrap();

        assert_eq!(outcome.selection.sequence, sampled.state.gen_tokens());
        assert_eq!(outcome.ledger.denoise_total(), ledger.denoise_total());
        assert_eq!(outcome.trace.branch_probe_nfe, 0);
    }

    #[test]
    fn executor_selection_picks_the_exact_match() {
        let rig = Rig::new(23, 16, 16, 4.0);
        let check = |completion: &[Token]| executor_check(&rig.task, completion);
        let mut drivers = rig.drivers();
        drivers.executor = Some(&check);
        let cfg = search_cfg(23);
        let outcome = run_hts(&cfg, &drivers, SelectionStrategy::Executor).unwrap();
        // With a strong oracle at least one survivor matches the target, and
        // the executor must then return a matching sequence.
        let any_match = outcome
            .pool
            .iter()
            .any(|tr| executor_check(&rig.task, tr.state.gen_tokens()));
        if any_match {
            assert!(executor_check(&rig.task, &outcome.selection.sequence));
        }
    }

    #[test]
    fn markers_terminate_trajectories_early() {
        let rig = Rig::new(29, 16, 16, 4.0);
        let mut cfg = search_cfg(29);
        // The first two target tokens decode early and reliably with a strong
        // oracle, so this marker fires long before the schedule runs out.
        cfg.markers = alloc::vec![alloc::vec![rig.task.target[0], rig.task.target[1]]];
        cfg.eos_token = 0;
        let outcome = run_hts(&cfg, &rig.drivers(), SelectionStrategy::Svf).unwrap();
        assert!(outcome.pool.iter().all(|tr| tr.state.is_complete()));
        assert!(!outcome.trace.terminated_at.is_empty());

        let exact = predicted_cost(&cfg, &outcome.trace.widths());
        assert!(
            outcome.ledger.denoise_total()
                <= exact.search_total() + outcome.trace.branch_probe_nfe,
            "early termination can only reduce the exact-schedule cost"
        );
    }

    #[test]
    fn invalid_config_aborts_before_any_charge() {
        let rig = Rig::new(3, 16, 16, 4.0);
        let cfg = HtsConfig {
            survivors: 99,
            ..search_cfg(3)
        };
        let abort = run_hts(&cfg, &rig.drivers(), SelectionStrategy::Svf).unwrap_err();
        assert!(matches!(abort.error, Error::InvalidConfig { .. }));
        assert_eq!(abort.ledger.denoise_total(), 0);
        assert!(abort.trace.steps.is_empty());
    }

    struct FailingDenoiser;

    impl DenoiserBackend for FailingDenoiser {
        fn evaluate(
            &self,
            _state: &SeqState,
            _conditioning: &Conditioning,
            _t: u32,
        ) -> Result<crate::diffusion::DenoiserOutput, BackendError> {
            Err(BackendError::new("denoiser offline"))
        }
    }

    #[test]
    fn denoiser_failure_aborts_with_partial_accounting() {
        let rig = Rig::new(3, 16, 16, 4.0);
        let mut drivers = rig.drivers();
        drivers.denoiser = &FailingDenoiser;
        let abort = run_hts(&search_cfg(3), &drivers, SelectionStrategy::Svf).unwrap_err();
        assert!(matches!(abort.error, Error::Backend(_)));
        assert_eq!(abort.ledger.denoise_total(), 0);
    }

    /// Judge whose verdict gap equals the completion's first token id, so
    /// selection order is fully controlled by content.
    struct FirstTokenJudge;

    impl VerifierBackend for FirstTokenJudge {
        fn judge(&self, request: &VerifyRequest<'_>) -> Result<JudgeResponse, BackendError> {
            let gap = match request.completion.first() {
                Some(Token::Id(id)) => f64::from(*id),
                _ => 0.0,
            };
            Ok(JudgeResponse {
                yes_logits: alloc::vec![gap],
                no_logits: alloc::vec![0.0],
            })
        }
    }

    fn finished(id: u64, decoded: &[TokenId]) -> Trajectory {
        let state = SeqState::completed(&[], decoded, decoded.len(), 1).unwrap();
        let mut tr = Trajectory::new(id, state, rng::stream(0, &[lane::TRAJECTORY, id]));
        tr.refresh_termination(1);
        tr
    }

    fn selection_ctx<'a>(
        verifier: &'a dyn VerifierBackend,
        template: &'a VerifyPromptTemplate,
        ledger: &'a NfeLedger,
        executor: Option<&'a dyn Fn(&[Token]) -> bool>,
    ) -> SelectionContext<'a> {
        SelectionContext {
            verifier,
            template,
            problem: "which sequence?",
            extractor: AnswerExtractor::FullSequence,
            executor,
            ledger,
            stage: Stage::Standalone,
        }
    }

    #[test]
    fn svf_selection_takes_the_best_score_with_lineage_ties() {
        let template = VerifyPromptTemplate::math_default();
        let ledger = NfeLedger::new();
        let ctx = selection_ctx(&FirstTokenJudge, &template, &ledger, None);
        // Pool deliberately out of lineage order; ids 1 and 2 tie on score.
        let pool = alloc::vec![
            finished(2, &[9, 0]),
            finished(0, &[3, 0]),
            finished(1, &[9, 0]),
        ];
        let pick = select_final(&pool, SelectionStrategy::Svf, &ctx).unwrap();
        assert_eq!(pick.lineage, 1, "tie must keep the lowest lineage id");
        assert_eq!(pick.sequence, alloc::vec![Token::Id(9), Token::Id(0)]);
        assert_eq!(ledger.svf_total(), 3);
    }

    #[test]
    fn majority_selection_counts_extracted_answers() {
        let template = VerifyPromptTemplate::math_default();
        let ledger = NfeLedger::new();
        let ctx = selection_ctx(&FirstTokenJudge, &template, &ledger, None);
        let pool = alloc::vec![
            finished(0, &[5, 5]),
            finished(1, &[7, 7]),
            finished(2, &[5, 5]),
        ];
        let pick = select_final(&pool, SelectionStrategy::Majority, &ctx).unwrap();
        assert_eq!(pick.sequence, alloc::vec![Token::Id(5), Token::Id(5)]);
        assert_eq!(ledger.svf_total(), 0, "voting never calls the judge");

        // A perfect tie resolves to the first answer in lineage order, even
        // when the pool is permuted.
        let pool = alloc::vec![finished(1, &[7, 7]), finished(0, &[5, 5])];
        let pick = select_final(&pool, SelectionStrategy::Majority, &ctx).unwrap();
        assert_eq!(pick.lineage, 0);
    }

    #[test]
    fn executor_selection_overrides_scores_and_falls_back() {
        let template = VerifyPromptTemplate::math_default();
        let ledger = NfeLedger::new();
        let target = [Token::Id(2), Token::Id(4)];
        let check = |completion: &[Token]| completion == target;
        let ctx = selection_ctx(&FirstTokenJudge, &template, &ledger, Some(&check));

        // The judge prefers the 9-sequence, but the checker knows better.
        let pool = alloc::vec![finished(0, &[9, 9]), finished(1, &[2, 4])];
        let pick = select_final(&pool, SelectionStrategy::Executor, &ctx).unwrap();
        assert_eq!(pick.lineage, 1);
        assert_eq!(ledger.svf_total(), 0);

        // No candidate passes: fall back to the judge.
        let pool = alloc::vec![finished(0, &[3, 3]), finished(1, &[9, 9])];
        let pick = select_final(&pool, SelectionStrategy::Executor, &ctx).unwrap();
        assert_eq!(pick.lineage, 1);
        assert_eq!(ledger.svf_total(), 2);

        // Strategy without a checker is a caller error.
        let no_exec = selection_ctx(&FirstTokenJudge, &template, &ledger, None);
        assert!(select_final(&pool, SelectionStrategy::Executor, &no_exec).is_err());
    }

    #[test]
    fn selection_rejects_empty_and_unfinished_pools() {
        let template = VerifyPromptTemplate::math_default();
        let ledger = NfeLedger::new();
        let ctx = selection_ctx(&FirstTokenJudge, &template, &ledger, None);
        assert!(select_final(&[], SelectionStrategy::Svf, &ctx).is_err());

        let unfinished = Trajectory::new(
            0,
            SeqState::new(&[], 4, 4, 2).unwrap(),
            rng::stream(0, &[lane::TRAJECTORY, 0]),
        );
        let pool = alloc::vec![unfinished];
        assert!(select_final(&pool, SelectionStrategy::Svf, &ctx).is_err());
    }

    #[test]
    fn verification_completions_follow_the_configured_mode() {
        use crate::diffusion::DenoiserOutput;

        let cfg = HtsConfig {
            gen_len: 4,
            block_size: 4,
            steps_per_block: 4,
            total_steps: 4,
            ..HtsConfig::default()
        };
        let state = SeqState::new(&[], 4, 4, 4).unwrap();
        let mut tr = Trajectory::new(3, state, rng::stream(9, &[lane::TRAJECTORY, 3]));
        assert_eq!(verification_completion(&tr, &cfg, 4), None);

        // Cache a prediction that prefers token 1 everywhere.
        let probs = DenoiserOutput::from_probs(4, 2, &[0.2, 0.8].repeat(4))
            .unwrap()
            .probabilities(1.0)
            .unwrap();
        let completion = alloc::vec![Token::Id(1); 4];
        tr.cache_step(completion.clone(), probs, 0.5);

        let argmax_cfg = HtsConfig {
            svf_completion_mode: CommitMode::Argmax,
            ..cfg.clone()
        };
        assert_eq!(
            verification_completion(&tr, &argmax_cfg, 4),
            Some(completion)
        );

        let sample_cfg = HtsConfig {
            svf_completion_mode: CommitMode::Sample,
            ..cfg
        };
        let a = verification_completion(&tr, &sample_cfg, 4).unwrap();
        let b = verification_completion(&tr, &sample_cfg, 4).unwrap();
        assert_eq!(a, b, "sampled verification draws are keyed, not streamed");
        assert!(a.iter().all(|tok| !tok.is_mask()));
        let c = verification_completion(&tr, &sample_cfg, 3).unwrap();
        // A different step may (and here does) draw a different completion.
        assert_ne!(a, c);
    }
}
