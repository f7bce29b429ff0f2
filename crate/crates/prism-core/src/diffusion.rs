//! Masked-diffusion primitives: forward corruption, reverse block decoding.
//!
//! The forward process independently replaces tokens with the mask symbol;
//! the
//! reverse process decodes block by block. Within the active block, one
//! denoiser call per step predicts a distribution for every generation
//! position, and positions are committed by two rules:
//!
//! * threshold commits — any masked position whose top temperature-scaled
//!   probability reaches the confidence threshold, and
//! * quota commits — the `ceil(remaining / steps_left)` most confident of the
//!   rest, which guarantees the block finishes within its step budget.
//!
//! The denoiser is conditioned on the active block's remaining step count
//! (each block restarts its own noise schedule), while the orchestrators
//! above index steps with a global countdown across all blocks.

use alloc::vec::Vec;

use rand::Rng;
use rand::distr::Distribution;
use rand::distr::weighted::WeightedIndex;

use crate::config::{CommitMode, HtsConfig};
use crate::error::{BackendError, Error};
use crate::ledger::{ChargeKind, NfeLedger, Stage};
use crate::num;
use crate::state::{SeqState, Token, TokenId};

/// Opaque conditioning handed to the denoiser alongside the state. The
/// simulated backends carry their own task context and only use this for
/// sanity checks; real adapters would embed the tokenized problem here.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conditioning {
    pub tokens: Vec<TokenId>,
}

impl Conditioning {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }
}

/// Per-position vocabulary logits for the generation window (row `r` is
/// generation position `r`, i.e. absolute position `prompt_len + r`).
///
/// `-inf` entries are allowed and mean "probability exactly zero"; NaN and
/// `+inf` are rejected, and every row must keep at least one finite entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    rows: usize,
    vocab: usize,
    logits: Vec<f64>,
}

impl DenoiserOutput {
    pub fn new(rows: usize, vocab: usize, logits: Vec<f64>) -> Result<Self, Error> {
        if vocab == 0 || logits.len() != rows * vocab {
            return Err(Error::InvalidArgument {
                what: "logits",
                message: "dimension mismatch".into(),
            });
        }
        for chunk in logits.chunks(vocab) {
            let mut any_finite = false;
            for &logit in chunk {
                if logit.is_nan() || logit == f64::INFINITY {
                    return Err(Error::NonFiniteLogit);
                }
                any_finite |= logit.is_finite();
            }
            if !any_finite {
                return Err(Error::NonFiniteLogit);
            }
        }
        Ok(Self { rows, vocab, logits })
    }

    /// Builds an output from per-position probability rows (each row must be
    /// non-negative and sum to something positive).
    pub fn from_probs(rows: usize, vocab: usize, probs: &[f64]) -> Result<Self, Error> {
        let logits = probs.iter().map(|&p| num::ln(p)).collect();
        Self::new(rows, vocab, logits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits_row(&self, row: usize) -> &[f64] {
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    /// Temperature-scaled softmax over every row. This is the single scaling
    /// point: confidence ranking, sampling, and entropy all reuse the result.
    pub fn probabilities(&self, temperature: f64) -> Result<ProbMatrix, Error> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidArgument {
                what: "temperature",
                message: "must be positive and finite".into(),
            });
        }
        let mut p = Vec::with_capacity(self.logits.len());
        for row in self.logits.chunks(self.vocab) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let start = p.len();
            for &logit in row {
                let w = num::exp((logit - max) / temperature);
                p.push(w);
                sum += w;
            }
            for w in &mut p[start..] {
                *w /= sum;
            }
        }
        Ok(ProbMatrix {
            rows: self.rows,
            vocab: self.vocab,
            p,
        })
    }
}

/// Row-normalized probabilities derived from a [`DenoiserOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: usize,
    vocab: usize,
    p: Vec<f64>,
}

impl ProbMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.p[row * self.vocab..(row + 1) * self.vocab]
    }

    /// Shannon entropy (natural log) of every row.
    pub fn entropies(&self) -> Vec<f64> {
        (0..self.rows).map(|r| token_entropy(self.row(r))).collect()
    }

    /// Mean row entropy — the per-step uncertainty diagnostic.
    pub fn mean_entropy(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        self.entropies().iter().sum::<f64>() / self.rows as f64
    }
}

/// Shannon entropy `−Σ p ln p` of one normalized distribution; zero-mass
/// entries contribute nothing.
pub fn token_entropy(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * num::ln(p);
        }
    }
    h
}

/// Survival schedule for the forward process: the probability a token is
/// still intact (not yet replaced by the mask) at noise level `t` of `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NoiseSchedule {
    Linear,
    Cosine,
}

impl NoiseSchedule {
    /// Survival probability at step `t ∈ [0, total]`; 1 at `t = 0` (clean),
    /// 0 at `t = total` (fully masked), monotone in between.
    pub fn alpha(&self, t: u32, total: u32) -> f64 {
        assert!(total > 0, "schedule needs a positive horizon");
        let x = f64::from(t.min(total)) / f64::from(total);
        match self {
            NoiseSchedule::Linear => 1.0 - x,
            NoiseSchedule::Cosine => num::cos(core::f64::consts::FRAC_PI_2 * x),
        }
    }
}

/// Forward corruption: independently keeps each generation token with
/// probability `alpha_t`, otherwise replaces it with the mask. The prompt
/// prefix is never touched.
pub fn forward_mask(
    state: &SeqState,
    alpha_t: f64,
    rng: &mut impl Rng,
) -> Result<SeqState, Error> {
    if !(0.0..=1.0).contains(&alpha_t) {
        return Err(Error::InvalidArgument {
            what: "alpha_t",
            message: "must lie in [0, 1]".into(),
        });
    }
    let mut out = state.clone();
    for p in state.gen_range() {
        if state.token(p).is_mask() {
            continue;
        }
        if !rng.random_bool(alpha_t) {
            out.clear(p)?;
        }
    }
    Ok(out)
}

/// A denoiser: given a partially decoded state, predicts a vocabulary
/// distribution for every generation position.
///
/// `t` is the noise position of the active block (its remaining step count).
/// Implementations must be pure functions of `(state, conditioning, t)` and
/// their own parameters, and callable concurrently. Every call costs one NFE;
/// charging is done by the calling operation.
pub trait DenoiserBackend: Sync {
    fn evaluate(
        &self,
        state: &SeqState,
        conditioning: &Conditioning,
        t: u32,
    ) -> Result<DenoiserOutput, BackendError>;
}

/// Test/diagnostic decorator that counts raw `evaluate` invocations, so
/// ledgers can be audited against ground truth.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn DenoiserBackend,
    calls: core::sync::atomic::AtomicU64,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn DenoiserBackend) -> Self {
        Self {
            inner,
            calls: core::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(core::sync::atomic::Ordering::Relaxed)
    }
}

impl DenoiserBackend for CountingDenoiser<'_> {
    fn evaluate(
        &self,
        state: &SeqState,
        conditioning: &Conditioning,
        t: u32,
    ) -> Result<DenoiserOutput, BackendError> {
        self.calls
            .fetch_add(1, core::sync::atomic::Ordering::Relaxed);
        self.inner.evaluate(state, conditioning, t)
    }
}

/// Everything the denoiser predicted during one step, kept so later stages
/// (verification, branching diagnostics) can reuse it without a new call.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEval {
    /// Fully specified sequence: committed tokens verbatim, masked positions
    /// filled with the per-row argmax.
    pub completion: Vec<Token>,
    /// Per-generation-position entropy of the prediction.
    pub entropies: Vec<f64>,
    /// Mean of `entropies`.
    pub mean_entropy: f64,
    /// The temperature-scaled distributions behind the prediction.
    pub probs: ProbMatrix,
}

/// Result of one denoise step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: SeqState,
    /// `None` when the step was a no-op (sequence already complete); no
    /// backend call happened and nothing was charged.
    pub eval: Option<StepEval>,
}

/// Argmax with ties broken toward the lowest token id.
fn argmax_token(row: &[f64]) -> TokenId {
    let mut best = 0usize;
    let mut best_p = row[0];
    for (v, &p) in row.iter().enumerate().skip(1) {
        if p > best_p {
            best = v;
            best_p = p;
        }
    }
    best as TokenId
}

fn fill_completion(state: &SeqState, probs: &ProbMatrix) -> Vec<Token> {
    let prompt_len = state.prompt_len();
    state
        .gen_tokens()
        .iter()
        .enumerate()
        .map(|(r, &tok)| match tok {
            Token::Mask => Token::Id(argmax_token(probs.row(r))),
            committed => {
                debug_assert!(state.is_committed(prompt_len + r));
                committed
            }
        })
        .collect()
}

pub(crate) fn sample_token(row: &[f64], rng: &mut impl Rng) -> Result<TokenId, Error> {
    let dist = WeightedIndex::new(row.iter().copied())
        .map_err(|e| Error::Internal(alloc::format!("unsampleable row: {e}")))?;
    Ok(dist.sample(rng) as TokenId)
}

/// Performs one reverse step on the state's active block.
///
/// Charges exactly one denoiser call unless the sequence is already complete
/// (then the state is returned unchanged and nothing is charged). Masked
/// positions outside the active block are never committed. Position ties in
/// the confidence ranking break toward the lowest position, then the lowest
/// token id.
pub fn denoise_step(
    backend: &dyn DenoiserBackend,
    state: &SeqState,
    conditioning: &Conditioning,
    cfg: &HtsConfig,
    rng: &mut impl Rng,
    ledger: &NfeLedger,
    stage: Stage,
) -> Result<StepOutcome, Error> {
    let Some(block) = state.current_block() else {
        return Ok(StepOutcome {
            state: state.clone(),
            eval: None,
        });
    };

    let t_block = state.steps_remaining(block).max(1);
    let output = backend.evaluate(state, conditioning, t_block)?;
    ledger.charge(ChargeKind::Denoise, stage, 1)?;
    if output.rows() != state.gen_len() {
        return Err(Error::Internal(
            "backend output rows must cover the generation window".into(),
        ));
    }
    let probs = output.probabilities(cfg.temperature)?;
    let entropies = probs.entropies();
    let mean_entropy = if entropies.is_empty() {
        0.0
    } else {
        entropies.iter().sum::<f64>() / entropies.len() as f64
    };
    let completion = fill_completion(state, &probs);

    let mut next = state.clone();
    let prompt_len = state.prompt_len();
    let masked: Vec<usize> = state.masked_in_block(block);
    // Confidence of a masked position = its top temperature-scaled probability.
    let confidence = |p: usize| -> f64 {
        let row = probs.row(p - prompt_len);
        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };

    let mut to_commit: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for &p in &masked {
        if confidence(p) >= cfg.commit_threshold {
            to_commit.push(p);
        } else {
            rest.push(p);
        }
    }
    // Quota: spread the remaining masks over the block's remaining steps
    // (including this one) so the block closes exactly on schedule.
    let steps_left = state.steps_remaining(block).max(1) as usize;
    let quota = num::div_ceil(rest.len(), steps_left);
    if quota > 0 && !rest.is_empty() {
        // Highest confidence first; ties toward the lowest position index.
        rest.sort_by(|&a, &b| {
            confidence(b)
                .partial_cmp(&confidence(a))
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        to_commit.extend(rest.into_iter().take(quota));
    }
    // Deterministic RNG consumption: commit in ascending position order.
    to_commit.sort_unstable();
    for p in to_commit {
        let row = probs.row(p - prompt_len);
        let id = match cfg.commit_mode {
            CommitMode::Argmax => argmax_token(row),
            CommitMode::Sample => sample_token(row, rng)?,
        };
        next.commit(p, id)?;
    }
    next.note_step(block);

    Ok(StepOutcome {
        state: next,
        eval: Some(StepEval {
            completion,
            entropies,
            mean_entropy,
            probs,
        }),
    })
}

/// Predicts a fully specified sequence in one denoiser call: committed
/// tokens are copied verbatim, masked positions are filled per `mode`.
/// Always charges exactly one call, even when nothing is masked.
pub fn complete(
    backend: &dyn DenoiserBackend,
    state: &SeqState,
    conditioning: &Conditioning,
    t: u32,
    mode: CommitMode,
    temperature: f64,
    rng: &mut impl Rng,
    ledger: &NfeLedger,
    stage: Stage,
) -> Result<Vec<Token>, Error> {
    let output = backend.evaluate(state, conditioning, t)?;
    ledger.charge(ChargeKind::Denoise, stage, 1)?;
    if output.rows() != state.gen_len() {
        return Err(Error::Internal(
            "backend output rows must cover the generation window".into(),
        ));
    }
    let probs = output.probabilities(temperature)?;
    let mut out = Vec::with_capacity(state.gen_len());
    for (r, &tok) in state.gen_tokens().iter().enumerate() {
        out.push(match tok {
            Token::Mask => Token::Id(match mode {
                CommitMode::Argmax => argmax_token(probs.row(r)),
                CommitMode::Sample => sample_token(probs.row(r), rng)?,
            }),
            committed => committed,
        });
    }
    Ok(out)
}

/// Scans the decoded region for an end-of-answer marker. On a match, every
/// remaining masked generation position is committed to `eos`, which
/// terminates the trajectory. The prompt prefix is excluded from the scan.
/// Returns the (possibly unchanged) state and whether a marker fired.
pub fn early_terminate_check(
    state: &SeqState,
    markers: &[Vec<TokenId>],
    eos: TokenId,
) -> (SeqState, bool) {
    let window = state.gen_tokens();
    let hit = markers.iter().any(|pattern| {
        !pattern.is_empty()
            && window.windows(pattern.len()).any(|w| {
                w.iter()
                    .zip(pattern)
                    .all(|(tok, &want)| *tok == Token::Id(want))
            })
    });
    if !hit {
        return (state.clone(), false);
    }
    let mut out = state.clone();
    for p in state.gen_range() {
        if out.token(p).is_mask() {
            out.commit(p, eos).expect("generation position");
        }
    }
    (out, true)
}

/// Entropy/charge record for one sampler step (used for trace export).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerStep {
    /// Global countdown step.
    pub t: u32,
    /// Whether a denoiser call happened at this step.
    pub charged: bool,
    pub mean_entropy: Option<f64>,
}

/// Result of a plain block-sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutcome {
    pub state: SeqState,
    pub steps: Vec<SamplerStep>,
    /// Step at which decoding finished (masks exhausted or marker fired).
    pub terminated_at: Option<u32>,
}

/// Decodes a fresh sequence with the plain block sampler: blocks left to
/// right, each from a fully masked initialization, at most `steps_per_block`
/// calls per block (fewer when threshold commits close it early). The ledger
/// receives at most `total_steps` denoise charges.
pub fn run_block_sampler(
    backend: &dyn DenoiserBackend,
    conditioning: &Conditioning,
    cfg: &HtsConfig,
    rng: &mut impl Rng,
    ledger: &NfeLedger,
    stage: Stage,
) -> Result<SamplerOutcome, Error> {
    cfg.validate()?;
    let mut state = SeqState::new(&[], cfg.gen_len, cfg.block_size, cfg.steps_per_block)?;
    let mut steps = Vec::new();
    let mut terminated_at = None;

    for t in (1..=cfg.total_steps).rev() {
        if state.is_complete() {
            break;
        }
        let outcome = denoise_step(backend, &state, conditioning, cfg, rng, ledger, stage)?;
        state = outcome.state;
        let (after_markers, _fired) = early_terminate_check(&state, &cfg.markers, cfg.eos_token);
        state = after_markers;
        let eval = outcome.eval;
        steps.push(SamplerStep {
            t,
            charged: eval.is_some(),
            mean_entropy: eval.as_ref().map(|e| e.mean_entropy),
        });
        if state.is_complete() && terminated_at.is_none() {
            terminated_at = Some(t);
        }
    }
    debug_assert!(state.is_complete(), "quota commits must close every block");
    Ok(SamplerOutcome {
        state,
        steps,
        terminated_at,
    })
}
