//! Exact accounting of backend calls.
//!
//! Every denoiser forward pass (NFE) and every verifier call is charged to an
//! [`NfeLedger`] together with the search stage it belongs to. Counters are
//! monotone atomics: the ledger is the only object shared between concurrent
//! workers, and concurrent charges settle to an exact total regardless of
//! interleaving. Nothing in this crate estimates cost by sampling — the
//! ledger must equal the true number of backend invocations.

use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::Error;

/// What kind of backend call is being charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChargeKind {
    /// One denoiser forward pass.
    Denoise,
    /// One verifier (self-verification) call.
    Svf,
}

/// Which part of the run a charge is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Stage {
    /// Wide stochastic search before any pruning.
    Exploration,
    /// Prune-and-branch window with decaying width.
    Thinning,
    /// Final narrow decoding of the surviving trajectories.
    Refinement,
    /// Plain block-sampler decoding outside the staged search.
    Standalone,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Exploration,
        Stage::Thinning,
        Stage::Refinement,
        Stage::Standalone,
    ];

    fn index(self) -> usize {
        match self {
            Stage::Exploration => 0,
            Stage::Thinning => 1,
            Stage::Refinement => 2,
            Stage::Standalone => 3,
        }
    }
}

/// Monotone per-stage counters for denoiser and verifier calls.
#[derive(Debug, Default)]
pub struct NfeLedger {
    denoise_total: AtomicU64,
    svf_total: AtomicU64,
    denoise: [AtomicU64; 4],
    svf: [AtomicU64; 4],
}

impl NfeLedger {
    /// Largest total either counter may reach; charges beyond this error out
    /// rather than wrap.
    pub const MAX_TOTAL: u64 = 1 << 62;

    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `count` calls of `kind` to `stage`.
    ///
    /// Errors with [`Error::LedgerOverflow`] if the affected total would
    /// exceed [`Self::MAX_TOTAL`]; the ledger is left unchanged in that case.
    /// The reservation is atomic, so concurrent charges can never wrap.
    pub fn charge(&self, kind: ChargeKind, stage: Stage, count: u64) -> Result<(), Error> {
        let (total, cells) = match kind {
            ChargeKind::Denoise => (&self.denoise_total, &self.denoise),
            ChargeKind::Svf => (&self.svf_total, &self.svf),
        };
        total
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |t| {
                let next = t.checked_add(count)?;
                (next <= Self::MAX_TOTAL).then_some(next)
            })
            .map_err(|_| Error::LedgerOverflow)?;
        cells[stage.index()].fetch_add(count, Ordering::Relaxed);
        Ok(())
    }

    /// Total denoiser forward passes across all stages.
    pub fn denoise_total(&self) -> u64 {
        self.denoise_total.load(Ordering::Relaxed)
    }

    /// Total verifier calls across all stages.
    pub fn svf_total(&self) -> u64 {
        self.svf_total.load(Ordering::Relaxed)
    }

    /// `(denoise, svf)` pair charged to one stage.
    pub fn stage_counts(&self, stage: Stage) -> (u64, u64) {
        let i = stage.index();
        (
            self.denoise[i].load(Ordering::Relaxed),
            self.svf[i].load(Ordering::Relaxed),
        )
    }

    /// Plain-old-data copy of all counters.
    pub fn snapshot(&self) -> LedgerCounts {
        let mut per_stage = [(0u64, 0u64); 4];
        for stage in Stage::ALL {
            per_stage[stage.index()] = self.stage_counts(stage);
        }
        LedgerCounts {
            denoise: self.denoise_total(),
            svf: self.svf_total(),
            per_stage,
        }
    }
}

/// Immutable snapshot of an [`NfeLedger`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LedgerCounts {
    pub denoise: u64,
    pub svf: u64,
    /// Indexed per [`Stage::ALL`] order; each entry is `(denoise, svf)`.
    pub per_stage: [(u64, u64); 4],
}

impl LedgerCounts {
    pub fn stage(&self, stage: Stage) -> (u64, u64) {
        self.per_stage[stage.index()]
    }

    /// Checks the additivity invariant: totals equal the sum over stages.
    pub fn is_consistent(&self) -> bool {
        let d: u64 = self.per_stage.iter().map(|(d, _)| d).sum();
        let s: u64 = self.per_stage.iter().map(|(_, s)| s).sum();
        d == self.denoise && s == self.svf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charges_accumulate_per_stage() {
        let ledger = NfeLedger::new();
        ledger
            .charge(ChargeKind::Denoise, Stage::Exploration, 16)
            .unwrap();
        assert_eq!(ledger.denoise_total(), 16);
        assert_eq!(ledger.stage_counts(Stage::Exploration), (16, 0));

        ledger
            .charge(ChargeKind::Denoise, Stage::Exploration, 8)
            .unwrap();
        ledger
            .charge(ChargeKind::Denoise, Stage::Thinning, 8)
            .unwrap();
        assert_eq!(ledger.denoise_total(), 32);
        assert_eq!(ledger.stage_counts(Stage::Exploration), (24, 0));
        assert_eq!(ledger.stage_counts(Stage::Thinning), (8, 0));
    }

    #[test]
    fn svf_charges_do_not_touch_denoise_counters() {
        let ledger = NfeLedger::new();
        ledger
            .charge(ChargeKind::Denoise, Stage::Exploration, 1048)
            .unwrap();
        ledger.charge(ChargeKind::Svf, Stage::Thinning, 27).unwrap();
        assert_eq!(ledger.svf_total(), 27);
        assert_eq!(ledger.denoise_total(), 1048);
        assert_eq!(ledger.stage_counts(Stage::Thinning), (0, 27));
    }

    #[test]
    fn overflow_is_an_error_and_leaves_counts_unchanged() {
        let ledger = NfeLedger::new();
        ledger
            .charge(ChargeKind::Denoise, Stage::Standalone, NfeLedger::MAX_TOTAL)
            .unwrap();
        let err = ledger
            .charge(ChargeKind::Denoise, Stage::Refinement, 1)
            .unwrap_err();
        assert_eq!(err, Error::LedgerOverflow);
        assert_eq!(ledger.denoise_total(), NfeLedger::MAX_TOTAL);
        // The other kind still has headroom accounting of its own.
        ledger.charge(ChargeKind::Svf, Stage::Refinement, 1).unwrap();
    }

    #[test]
    fn snapshot_is_consistent_and_stable() {
        let ledger = NfeLedger::new();
        ledger
            .charge(ChargeKind::Denoise, Stage::Exploration, 3)
            .unwrap();
        ledger.charge(ChargeKind::Svf, Stage::Thinning, 2).unwrap();
        ledger
            .charge(ChargeKind::Denoise, Stage::Refinement, 5)
            .unwrap();
        let snap = ledger.snapshot();
        assert!(snap.is_consistent());
        assert_eq!(snap.denoise, 8);
        assert_eq!(snap.svf, 2);
        assert_eq!(snap.stage(Stage::Refinement), (5, 0));
    }

    #[test]
    fn concurrent_charges_settle_to_the_exact_total() {
        extern crate std;
        use std::sync::Arc;

        let ledger = Arc::new(NfeLedger::new());
        let mut handles = std::vec::Vec::new();
        for _ in 0..8 {
            let ledger = Arc::clone(&ledger);
            handles.push(std::thread::spawn(move || {
                for _ in 0..1000 {
                    ledger
                        .charge(ChargeKind::Denoise, Stage::Thinning, 1)
                        .unwrap();
                    ledger.charge(ChargeKind::Svf, Stage::Thinning, 1).unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(ledger.denoise_total(), 8000);
        assert_eq!(ledger.svf_total(), 8000);
        assert!(ledger.snapshot().is_consistent());
    }
}
