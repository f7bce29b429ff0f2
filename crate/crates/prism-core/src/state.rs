//! Token sequences for block-wise masked diffusion decoding.
//!
//! A [`SeqState`] is a fixed-length token buffer: an optional committed
//! prompt prefix followed by a generation window that is partitioned into
//! equal blocks. Decoding proceeds block by block; within the active block,
//! masked positions are committed over a bounded number of steps. The state
//! carries the per-block step budget so the reverse sampler can spread its
//! commits evenly and finish every block on schedule.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::diffusion::ProbMatrix;
use crate::error::Error;
use crate::rng::Stream;
use crate::svf::SvfScore;

/// Vocabulary index of a concrete token.
pub type TokenId = u32;

/// A position's content: either a concrete token or the absorbing mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Token {
    Mask,
    Id(TokenId),
}

impl Token {
    pub fn is_mask(self) -> bool {
        matches!(self, Token::Mask)
    }

    pub fn id(self) -> Option<TokenId> {
        match self {
            Token::Mask => None,
            Token::Id(id) => Some(id),
        }
    }
}

/// A partially decoded sequence plus its block-schedule bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqState {
    tokens: Vec<Token>,
    committed: Vec<bool>,
    prompt_len: usize,
    block_size: usize,
    steps_per_block: u32,
    block_steps_used: Vec<u32>,
}

impl SeqState {
    /// Fresh state: committed prompt prefix, fully masked generation window.
    ///
    /// `gen_len` must be a positive multiple of `block_size`.
    pub fn new(
        prompt: &[TokenId],
        gen_len: usize,
        block_size: usize,
        steps_per_block: u32,
    ) -> Result<Self, Error> {
        if block_size == 0 {
            return Err(Error::InvalidArgument {
                what: "block_size",
                message: "must be positive".into(),
            });
        }
        if gen_len == 0 || gen_len % block_size != 0 {
            return Err(Error::InvalidArgument {
                what: "gen_len",
                message: "must be a positive multiple of block_size".into(),
            });
        }
        if steps_per_block == 0 {
            return Err(Error::InvalidArgument {
                what: "steps_per_block",
                message: "must be positive".into(),
            });
        }
        let prompt_len = prompt.len();
        let mut tokens = Vec::with_capacity(prompt_len + gen_len);
        tokens.extend(prompt.iter().map(|&id| Token::Id(id)));
        tokens.extend(core::iter::repeat_n(Token::Mask, gen_len));
        let mut committed = vec![true; prompt_len];
        committed.extend(core::iter::repeat_n(false, gen_len));
        let blocks = gen_len / block_size;
        Ok(Self {
            tokens,
            committed,
            prompt_len,
            block_size,
            steps_per_block,
            block_steps_used: vec![0; blocks],
        })
    }

    /// Fully committed state over the given generation tokens (a clean
    /// sequence, e.g. the input to forward masking).
    pub fn completed(
        prompt: &[TokenId],
        decoded: &[TokenId],
        block_size: usize,
        steps_per_block: u32,
    ) -> Result<Self, Error> {
        let mut state = Self::new(prompt, decoded.len(), block_size, steps_per_block)?;
        for (offset, &id) in decoded.iter().enumerate() {
            let p = state.prompt_len + offset;
            state.tokens[p] = Token::Id(id);
            state.committed[p] = true;
        }
        // A clean sequence has no decoding left to do.
        for used in &mut state.block_steps_used {
            *used = steps_per_block;
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block_count(&self) -> usize {
        self.gen_len() / self.block_size
    }

    pub fn steps_per_block(&self) -> u32 {
        self.steps_per_block
    }

    /// Absolute positions of the generation window.
    pub fn gen_range(&self) -> Range<usize> {
        self.prompt_len..self.tokens.len()
    }

    pub fn token(&self, position: usize) -> Token {
        self.tokens[position]
    }

    pub fn is_committed(&self, position: usize) -> bool {
        self.committed[position]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// The generation window as a token slice.
    pub fn gen_tokens(&self) -> &[Token] {
        &self.tokens[self.prompt_len..]
    }

    /// Absolute span of generation block `b`.
    pub fn block_span(&self, block: usize) -> Range<usize> {
        let start = self.prompt_len + block * self.block_size;
        start..start + self.block_size
    }

    /// Block index of an absolute generation position.
    pub fn block_of(&self, position: usize) -> Option<usize> {
        if position < self.prompt_len || position >= self.tokens.len() {
            return None;
        }
        Some((position - self.prompt_len) / self.block_size)
    }

    /// First block that still contains a mask, i.e. the block the reverse
    /// sampler works on next. `None` once the sequence is fully committed.
    pub fn current_block(&self) -> Option<usize> {
        (0..self.block_count()).find(|&b| self.block_has_mask(b))
    }

    /// The block local branching applies to: the active block while decoding
    /// is in flight, the last block once the sequence is complete.
    pub fn branch_block(&self) -> usize {
        self.current_block().unwrap_or(self.block_count() - 1)
    }

    pub fn block_has_mask(&self, block: usize) -> bool {
        self.block_span(block).any(|p| self.tokens[p].is_mask())
    }

    /// True when no mask remains anywhere in the generation window.
    pub fn is_complete(&self) -> bool {
        self.tokens[self.prompt_len..]
            .iter()
            .all(|t| !t.is_mask())
    }

    /// Absolute positions of masks inside one block, ascending.
    pub fn masked_in_block(&self, block: usize) -> Vec<usize> {
        self.block_span(block)
            .filter(|&p| self.tokens[p].is_mask())
            .collect()
    }

    /// Number of masked positions in the whole generation window.
    pub fn masked_count(&self) -> usize {
        self.tokens[self.prompt_len..]
            .iter()
            .filter(|t| t.is_mask())
            .count()
    }

    /// Denoising steps already spent on `block`.
    pub fn steps_used(&self, block: usize) -> u32 {
        self.block_steps_used[block]
    }

    /// Steps the schedule still grants `block`. While a block contains masks
    /// this is at least 1: the commit quota forces completion no later than
    /// the final budgeted step.
    pub fn steps_remaining(&self, block: usize) -> u32 {
        self.steps_per_block
            .saturating_sub(self.block_steps_used[block])
    }

    /// Noise-schedule position the denoiser should be conditioned on for the
    /// active block (its remaining step count, in `1..=steps_per_block`).
    /// `None` once the sequence is complete.
    pub fn noise_position(&self) -> Option<u32> {
        let block = self.current_block()?;
        Some(self.steps_remaining(block).max(1))
    }

    pub(crate) fn commit(&mut self, position: usize, id: TokenId) -> Result<(), Error> {
        if position < self.prompt_len || position >= self.tokens.len() {
            return Err(Error::InvalidPosition {
                position,
                message: "outside the generation window".into(),
            });
        }
        self.tokens[position] = Token::Id(id);
        self.committed[position] = true;
        Ok(())
    }

    /// Reverts a generation position to the mask token.
    pub(crate) fn clear(&mut self, position: usize) -> Result<(), Error> {
        if position < self.prompt_len || position >= self.tokens.len() {
            return Err(Error::InvalidPosition {
                position,
                message: "outside the generation window".into(),
            });
        }
        self.tokens[position] = Token::Mask;
        self.committed[position] = false;
        Ok(())
    }

    pub(crate) fn note_step(&mut self, block: usize) {
        self.block_steps_used[block] = self.block_steps_used[block].saturating_add(1);
    }

    /// Re-opens budget for a block whose schedule had already finished: after
    /// remasking, the block must have at least one step left so the commit
    /// quota can close it again.
    pub(crate) fn grant_reopen_budget(&mut self, block: usize) {
        let cap = self.steps_per_block - 1;
        if self.block_steps_used[block] > cap {
            self.block_steps_used[block] = cap;
        }
    }
}

/// One search hypothesis: a state plus lineage metadata and a private RNG
/// stream. The stream travels with the trajectory, so branching or pruning
/// other pool members can never perturb this trajectory's randomness.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub state: SeqState,
    /// Lineage id; stable for the trajectory's whole life.
    pub id: u64,
    /// Lineage id of the seed this trajectory was branched from.
    pub parent: Option<u64>,
    /// Most recent verifier score, if any.
    pub last_svf: Option<SvfScore>,
    /// Set once the state is fully committed (or an answer marker fired).
    pub terminated: bool,
    /// Step at which the trajectory terminated.
    pub terminated_at: Option<u32>,
    rng: Stream,
    last_completion: Option<Vec<Token>>,
    last_probs: Option<ProbMatrix>,
    last_mean_entropy: Option<f64>,
}

impl Trajectory {
    pub fn new(id: u64, state: SeqState, rng: Stream) -> Self {
        Self {
            state,
            id,
            parent: None,
            last_svf: None,
            terminated: false,
            terminated_at: None,
            rng,
            last_completion: None,
            last_probs: None,
            last_mean_entropy: None,
        }
    }

    pub fn child(id: u64, parent: &Trajectory, state: SeqState, rng: Stream) -> Self {
        Self {
            state,
            id,
            parent: Some(parent.id),
            last_svf: parent.last_svf,
            terminated: false,
            terminated_at: None,
            rng,
            last_completion: parent.last_completion.clone(),
            last_probs: parent.last_probs.clone(),
            last_mean_entropy: parent.last_mean_entropy,
        }
    }

    pub fn rng_mut(&mut self) -> &mut Stream {
        &mut self.rng
    }

    /// Disjoint views for a decode call: the state read-only alongside the
    /// private stream mutably.
    pub fn decode_parts(&mut self) -> (&SeqState, &mut Stream) {
        (&self.state, &mut self.rng)
    }

    /// Caches the full-sequence prediction produced by the latest denoiser
    /// call, so verification can reuse it without another forward pass.
    pub fn cache_step(&mut self, completion: Vec<Token>, probs: ProbMatrix, mean_entropy: f64) {
        self.last_completion = Some(completion);
        self.last_probs = Some(probs);
        self.last_mean_entropy = Some(mean_entropy);
    }

    /// Per-position distributions from the latest denoiser call.
    pub fn last_probs(&self) -> Option<&ProbMatrix> {
        self.last_probs.as_ref()
    }

    /// Best available fully specified completion of the generation window:
    /// the decoded tokens once terminated, otherwise the cached prediction.
    pub fn completion(&self) -> Option<Vec<Token>> {
        if self.state.is_complete() {
            return Some(self.state.gen_tokens().to_vec());
        }
        self.last_completion.clone()
    }

    pub fn last_mean_entropy(&self) -> Option<f64> {
        self.last_mean_entropy
    }

    /// Re-derives `terminated` from the state; records the step on the first
    /// transition.
    pub fn refresh_termination(&mut self, step: u32) {
        if !self.terminated && self.state.is_complete() {
            self.terminated = true;
            self.terminated_at = Some(step);
        }
    }
}
