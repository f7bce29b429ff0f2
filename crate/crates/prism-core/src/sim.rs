//! Simulated backends: planted recovery tasks, a fidelity oracle standing in
//! for the denoiser, and a noisy judge standing in for the verifier.
//!
//! A planted task hides one target sequence plus a handful of near-miss
//! distractors. The oracle denoiser leaks the target with a fidelity that
//! grows as a block's schedule runs down, so decoding behaves like a real
//! model: early steps are near-uniform guesses, late steps are confident,
//! and distractor tokens keep plausible wrong modes alive. The judge scores
//! a completion by a yes/no logit pair whose separation (the gap) is a
//! single dial, corrupted by Gaussian logit noise and an optional label
//! flip — which is what the search-quality experiments sweep.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{Conditioning, DenoiserBackend, DenoiserOutput};
use crate::error::{BackendError, Error};
use crate::num;
use crate::rng::{self, lane};
use crate::state::{SeqState, Token, TokenId};
use crate::svf::{JudgeResponse, VerifierBackend, VerifyRequest};

/// One synthetic recovery problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    /// Task index (also the lane key of its generator stream).
    pub index: u64,
    /// Opaque conditioning token identifying the task.
    pub prompt: Vec<TokenId>,
    /// The planted answer the decoder is supposed to recover; never masked.
    pub target: Vec<TokenId>,
    /// Near-misses of the target (small Hamming ball), all distinct from it.
    pub distractors: Vec<Vec<TokenId>>,
    /// Fidelity exponent γ > 0: larger keeps the oracle uninformative longer.
    pub difficulty: f64,
    pub vocab: usize,
}

impl PlantedTask {
    /// Human-readable problem statement for verification prompts.
    pub fn problem_text(&self) -> String {
        format!(
            "Recover planted sequence #{} (length {}, vocabulary {}).",
            self.index,
            self.target.len(),
            self.vocab
        )
    }

    pub fn conditioning(&self) -> Conditioning {
        Conditioning::new(self.prompt.clone())
    }
}

/// Builds a task deterministically from `(seed, index)`.
///
/// Distractors are copies of the target with between 1 and `ceil(len/4)`
/// positions swapped for a different token, so they are plausible but never
/// equal to the target.
pub fn make_planted_task(
    seed: u64,
    index: u64,
    gen_len: usize,
    vocab: usize,
    distractors: usize,
    difficulty: f64,
) -> Result<PlantedTask, Error> {
    if vocab < 3 {
        return Err(Error::InvalidArgument {
            what: "vocab",
            message: "needs at least 3 tokens (target, distractor, other)".into(),
        });
    }
    if gen_len == 0 {
        return Err(Error::InvalidArgument {
            what: "gen_len",
            message: "must be positive".into(),
        });
    }
    if !(difficulty > 0.0 && difficulty.is_finite()) {
        return Err(Error::InvalidArgument {
            what: "difficulty",
            message: "must be finite and positive".into(),
        });
    }
    let mut r = rng::stream(seed, &[lane::TASK, index]);
    let v = vocab as TokenId;
    let prompt = alloc::vec![r.random_range(0..v)];
    let target: Vec<TokenId> = (0..gen_len).map(|_| r.random_range(0..v)).collect();
    let max_flips = num::div_ceil(gen_len, 4);
    let mut near = Vec::with_capacity(distractors);
    for _ in 0..distractors {
        let mut alt = target.clone();
        let flips = r.random_range(1..=max_flips);
        for p in rand::seq::index::sample(&mut r, gen_len, flips) {
            // Uniform over the other vocab entries, never the original.
            let step = r.random_range(1..v);
            alt[p] = (alt[p] + step) % v;
        }
        near.push(alt);
    }
    Ok(PlantedTask {
        index,
        prompt,
        target,
        distractors: near,
        difficulty,
        vocab,
    })
}

/// Shape of the oracle denoiser's leak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    /// Minimum target mass ε: target probability on a fresh block.
    pub floor: f64,
    /// Share of the non-target mass routed to the position's distractor
    /// token; the rest is uniform noise.
    pub distractor_mass: f64,
    /// Target probability at positions already committed correctly: the
    /// model "stands by" tokens that fit, which keeps their entropy low and
    /// steers remasking toward the positions that do not.
    pub matched_boost: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            floor: 0.02,
            distractor_mass: 0.5,
            matched_boost: 0.98,
        }
    }
}

/// Evaluates the oracle at block-noise position `t` of `horizon` (both
/// 1-based; `t = horizon` is a fresh block).
///
/// Target fidelity is `ε + (1 − ε) · (1 − t/horizon)^γ`. Each position
/// routes `distractor_mass` of the remainder to its distractor token (the
/// distractor set is cycled by position; collisions with the target simply
/// merge) and spreads the rest uniformly over the other vocabulary entries.
pub fn oracle_denoise(
    task: &PlantedTask,
    params: &OracleParams,
    state: &SeqState,
    t: u32,
    horizon: u32,
) -> Result<DenoiserOutput, Error> {
    if horizon == 0 {
        return Err(Error::InvalidArgument {
            what: "horizon",
            message: "must be positive".into(),
        });
    }
    if state.gen_len() != task.target.len() {
        return Err(Error::InvalidArgument {
            what: "state",
            message: "generation window does not match the task length".into(),
        });
    }
    if !(0.0..1.0).contains(&params.floor)
        || !(0.0..=1.0).contains(&params.distractor_mass)
        || !(params.matched_boost > 0.0 && params.matched_boost <= 1.0)
    {
        return Err(Error::InvalidArgument {
            what: "params",
            message: "oracle parameters out of range".into(),
        });
    }
    let rows = state.gen_len();
    let v = task.vocab;
    let progress = 1.0 - f64::from(t.clamp(1, horizon)) / f64::from(horizon);
    let base = params.floor + (1.0 - params.floor) * num::powf(progress, task.difficulty);

    let mut probs = alloc::vec![0.0f64; rows * v];
    let prompt_len = state.prompt_len();
    for r in 0..rows {
        let tgt = task.target[r] as usize;
        let committed_match = state.token(prompt_len + r) == Token::Id(task.target[r]);
        let p_tgt = if committed_match {
            base.max(params.matched_boost)
        } else {
            base
        };
        let row = &mut probs[r * v..(r + 1) * v];
        row[tgt] = p_tgt;
        let remainder = 1.0 - p_tgt;
        let spread = if task.distractors.is_empty() {
            remainder
        } else {
            let alt = &task.distractors[r % task.distractors.len()];
            row[alt[r] as usize] += remainder * params.distractor_mass;
            remainder * (1.0 - params.distractor_mass)
        };
        let per_other = spread / (v - 1) as f64;
        for (tok, p) in row.iter_mut().enumerate() {
            if tok != tgt {
                *p += per_other;
            }
        }
    }
    DenoiserOutput::from_probs(rows, v, &probs)
}

/// The planted-task denoiser backend. The horizon of the fidelity schedule
/// is the per-block step budget: every block replays the same noise ramp.
pub struct SimDenoiser {
    pub task: PlantedTask,
    pub params: OracleParams,
}

impl SimDenoiser {
    pub fn new(task: PlantedTask) -> Self {
        Self {
            task,
            params: OracleParams::default(),
        }
    }
}

impl DenoiserBackend for SimDenoiser {
    fn evaluate(
        &self,
        state: &SeqState,
        conditioning: &Conditioning,
        t: u32,
    ) -> Result<DenoiserOutput, BackendError> {
        // Conditioning is opaque to the search, but the simulator can still
        // catch a mis-wired task.
        if !conditioning.tokens.is_empty() && conditioning.tokens != self.task.prompt {
            return Err(BackendError::new("conditioning does not match the task"));
        }
        oracle_denoise(
            &self.task,
            &self.params,
            state,
            t,
            state.steps_per_block(),
        )
        .map_err(|e| BackendError::new(format!("{e}")))
    }
}

/// Judge behavior dials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimVerifierParams {
    /// Logit separation g ≥ 0 between correct and incorrect completions; the
    /// discrimination dial.
    pub gap: f64,
    /// Standard deviation of the Gaussian noise added to each logit.
    pub noise_sd: f64,
    /// Probability the correctness label is corrupted, in `[0, 0.5)`.
    pub flip_rate: f64,
}

impl Default for SimVerifierParams {
    fn default() -> Self {
        Self {
            gap: 4.0,
            noise_sd: 1.5,
            flip_rate: 0.0,
        }
    }
}

/// Ground-truth check: the completion is exactly the planted target
/// (token-wise equality; masks never match).
pub fn executor_check(task: &PlantedTask, completion: &[Token]) -> bool {
    completion.len() == task.target.len()
        && completion
            .iter()
            .zip(&task.target)
            .all(|(tok, &want)| *tok == Token::Id(want))
}

/// Standard normal via the Box–Muller transform.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]: keeps the log finite
    let u2: f64 = rng.random::<f64>();
    num::sqrt(-2.0 * num::ln(u1)) * num::cos(2.0 * core::f64::consts::PI * u2)
}

fn completion_digest(completion: &[Token]) -> u64 {
    rng::digest_u32s(completion.iter().map(|tok| match tok {
        Token::Mask => u32::MAX,
        Token::Id(id) => *id,
    }))
}

/// Scores one completion. The label is `(completion == target)` xor a flip
/// drawn at `flip_rate`; a true label puts `+gap/2` on the yes logit and
/// `−gap/2` on the no logit (signs swapped otherwise), and each logit is
/// then perturbed by independent Gaussian noise.
///
/// Randomness is keyed by the completion's digest, so the same completion
/// always gets the same verdict and judging never advances decoder streams.
pub fn sim_judge(
    task: &PlantedTask,
    params: &SimVerifierParams,
    completion: &[Token],
    seed: u64,
) -> JudgeResponse {
    let mut r = rng::stream(seed, &[lane::JUDGE, completion_digest(completion)]);
    let mut correct = executor_check(task, completion);
    if params.flip_rate > 0.0 && r.random_bool(params.flip_rate.clamp(0.0, 1.0)) {
        correct = !correct;
    }
    let half = if correct { params.gap / 2.0 } else { -params.gap / 2.0 };
    let yes = half + params.noise_sd * standard_normal(&mut r);
    let no = -half + params.noise_sd * standard_normal(&mut r);
    JudgeResponse {
        yes_logits: alloc::vec![yes],
        no_logits: alloc::vec![no],
    }
}

/// The planted-task verifier backend.
pub struct SimVerifier {
    pub task: PlantedTask,
    pub params: SimVerifierParams,
    pub seed: u64,
}

impl VerifierBackend for SimVerifier {
    fn judge(&self, request: &VerifyRequest<'_>) -> Result<JudgeResponse, BackendError> {
        Ok(sim_judge(&self.task, &self.params, request.completion, self.seed))
    }
}
