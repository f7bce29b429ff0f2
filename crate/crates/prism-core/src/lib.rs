//! Test-time scaling for masked discrete diffusion decoders.
//!
//! This crate implements a search stack that trades extra denoiser calls for
//! output quality when decoding with an absorbing-state (mask-token) discrete
//! diffusion model:
//!
//! * [`diffusion`] — forward masking, block-wise reverse decoding, and the
//!   plain block sampler used by the baselines.
//! * [`svf`] — self-verified feedback: the decoder itself (or any judge
//!   backend) scores a candidate completion by comparing the logits of an
//!   affirmative versus a negative verdict token.
//! * [`branching`] — partial-remask local branching: re-open the least
//!   confident positions of a survivor so its children explore alternatives
//!   while preserving the committed skeleton.
//! * [`hts`] — hierarchical trajectory search: a wide stochastic exploration
//!   phase, a thinning phase with geometric width decay driven by verifier
//!   scores, and a narrow refinement phase with early termination.
//! * [`sim`] — deterministic planted-task denoiser and verifier backends so
//!   the whole stack can be benchmarked without a neural model.
//! * [`baselines`] — single-trajectory decoding, best-of-N, majority vote.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats, and the CLI live in
//! the companion `prism-cli` crate. All randomness flows through explicitly
//! seeded per-trajectory streams (see [`rng`]) so that identically configured
//! runs are bit-identical and pruning order cannot perturb survivors.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baselines;
pub mod branching;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod hts;
pub mod ledger;
pub mod rng;
pub mod sim;
pub mod state;
pub mod svf;

mod num;

pub use config::{CommitMode, HtsConfig};
pub use error::{BackendError, Error};
pub use ledger::{ChargeKind, LedgerCounts, NfeLedger, Stage};
pub use state::{SeqState, Token, TokenId, Trajectory};
