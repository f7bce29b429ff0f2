//! Dial-tuning harness for the simulated-backend benchmark suites.
//!
//! Prints accuracy/NFE tables over small task batches so oracle difficulty,
//! commit thresholds, and window placements can be chosen empirically before
//! freezing them in the integration tests.
//!
//! Usage: `cargo run --release -p prism-core --example calibrate -- [eff|gap]`

use prism_core::baselines::{AnswerExtractor, run_best_of_n};
use prism_core::hts::{HtsDrivers, SelectionContext, SelectionStrategy, run_hts, select_final};
use prism_core::ledger::{NfeLedger, Stage};
use prism_core::sim::{
    PlantedTask, SimDenoiser, SimVerifier, SimVerifierParams, executor_check, make_planted_task,
};
use prism_core::svf::VerifyPromptTemplate;
use prism_core::{CommitMode, HtsConfig};

const GEN_LEN: usize = 32;
const VOCAB: usize = 32;
const BLOCK: usize = 8;
const SPB: u32 = 8;
const TOTAL: u32 = 32;

fn task_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index)
}

fn base_cfg(seed: u64) -> HtsConfig {
    HtsConfig {
        gen_len: GEN_LEN,
        block_size: BLOCK,
        steps_per_block: SPB,
        total_steps: TOTAL,
        temperature: 0.7,
        commit_mode: CommitMode::Sample,
        seed,
        ..HtsConfig::default()
    }
}

struct Bench {
    task: PlantedTask,
    denoiser: SimDenoiser,
    verifier: SimVerifier,
    template: VerifyPromptTemplate,
    conditioning: prism_core::diffusion::Conditioning,
    problem: String,
}

impl Bench {
    fn new(seed: u64, index: u64, gamma: f64, gap: f64, noise_sd: f64) -> Self {
        let task = make_planted_task(seed, index, GEN_LEN, VOCAB, 2, gamma).unwrap();
        let denoiser = SimDenoiser::new(task.clone());
        let verifier = SimVerifier {
            task: task.clone(),
            params: SimVerifierParams {
                gap,
                noise_sd,
                flip_rate: 0.0,
            },
            seed: task_seed(seed, index),
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

/// Accuracy/NFE of best-of-16 with majority voting at the nominal schedule.
fn bench_bst16(seed: u64, tasks: u64, gamma: f64) -> (f64, f64) {
    let mut hits = 0u64;
    let mut nfe = 0u64;
    for i in 0..tasks {
        let b = Bench::new(seed, i, gamma, 4.0, 1.5);
        let cfg = HtsConfig {
            commit_threshold: 1.0,
            ..base_cfg(task_seed(seed, i))
        };
        let out = run_best_of_n(&cfg, 16, &b.drivers(), SelectionStrategy::Majority).unwrap();
        if executor_check(&b.task, &out.selection.sequence) {
            hits += 1;
        }
        nfe += out.ledger.denoise_total();
    }
    (hits as f64 / tasks as f64, nfe as f64 / tasks as f64)
}

struct SearchDials {
    tau: f64,
    wmin: f64,
    wmax: f64,
    interval: u32,
    k: usize,
    gap: f64,
    noise_sd: f64,
    pool_param: f64,
    subset: f64,
    protect: bool,
}

impl Default for SearchDials {
    fn default() -> Self {
        Self {
            tau: 0.9,
            wmin: 0.1,
            wmax: 0.9,
            interval: 4,
            k: 8,
            gap: 4.0,
            noise_sd: 1.5,
            pool_param: 0.25,
            subset: 0.25,
            protect: false,
        }
    }
}

#[derive(Default)]
struct SearchReport {
    acc: f64,
    nfe: f64,
    /// Fraction of tasks whose final pool held at least one exact answer.
    pool_any: f64,
    /// Mean Hamming distance of the selected sequence to the target.
    sel_dist: f64,
    /// Mean Hamming distance of the best pool member to the target.
    best_dist: f64,
}

fn hamming(task: &PlantedTask, completion: &[prism_core::Token]) -> usize {
    completion
        .iter()
        .zip(&task.target)
        .filter(|(tok, want)| **tok != prism_core::Token::Id(**want))
        .count()
        + task.target.len().saturating_sub(completion.len())
}

fn bench_search(seed: u64, tasks: u64, gamma: f64, dials: &SearchDials) -> SearchReport {
    let mut rep = SearchReport::default();
    for i in 0..tasks {
        let b = Bench::new(seed, i, gamma, dials.gap, dials.noise_sd);
        let cfg = HtsConfig {
            initial_width: 16,
            survivors: 2,
            target_width: dials.k,
            window_min: dials.wmin,
            window_max: dials.wmax,
            prune_interval: dials.interval,
            commit_threshold: dials.tau,
            remask: prism_core::branching::RemaskPolicy {
                pool_param: dials.pool_param,
                subset_fraction: dials.subset,
                protect_committed_blocks: dials.protect,
                ..Default::default()
            },
            ..base_cfg(task_seed(seed, i))
        };
        let out = run_hts(&cfg, &b.drivers(), SelectionStrategy::Svf).unwrap();
        if executor_check(&b.task, &out.selection.sequence) {
            rep.acc += 1.0;
        }
        rep.nfe += out.ledger.denoise_total() as f64;
        if out
            .pool
            .iter()
            .any(|tr| executor_check(&b.task, tr.state.gen_tokens()))
        {
            rep.pool_any += 1.0;
        }
        rep.sel_dist += hamming(&b.task, &out.selection.sequence) as f64;
        rep.best_dist += out
            .pool
            .iter()
            .map(|tr| hamming(&b.task, tr.state.gen_tokens()))
            .min()
            .unwrap_or(usize::MAX) as f64;
    }
    let n = tasks as f64;
    rep.acc /= n;
    rep.nfe /= n;
    rep.pool_any /= n;
    rep.sel_dist /= n;
    rep.best_dist /= n;
    rep
}

fn eff_table() {
    let tasks = 100;
    let seed = 101;
    for gamma in [0.3, 0.5] {
        let (bacc, bnfe) = bench_bst16(seed, tasks, gamma);
        println!("gamma {gamma:>4}: bst16 acc {bacc:.3} nfe {bnfe:>6.1}");
        for (wmax, interval, subset) in [(0.95, 3, 0.5), (0.9, 4, 0.5), (0.95, 4, 0.5)] {
            for k in [2usize, 4, 8] {
                let dials = SearchDials {
                    wmax,
                    interval,
                    k,
                    subset,
                    ..SearchDials::default()
                };
                let r = bench_search(seed, tasks, gamma, &dials);
                println!(
                    "  wmax {wmax:.2} iv {interval} sub {subset:.2} K {k}: acc {:.3} nfe {:>6.1} ({:.1}% of bst16) pool_any {:.3} sel_dist {:.2} best_dist {:.2}",
                    r.acc,
                    r.nfe,
                    100.0 * r.nfe / bnfe,
                    r.pool_any,
                    r.sel_dist,
                    r.best_dist
                );
            }
        }
    }
}

fn gap_table() {
    let tasks = 100;
    let seed = 201;
    for gamma in [0.8, 1.2, 1.6] {
        for noise in [1.5, 2.5] {
            print!("gamma {gamma:>4} noise {noise:>4}:");
            for gap in [0.0, 1.0, 2.0, 4.0] {
                let dials = SearchDials {
                    wmax: 0.95,
                    interval: 3,
                    subset: 0.5,
                    gap,
                    noise_sd: noise,
                    ..SearchDials::default()
                };
                let r = bench_search(seed, tasks, gamma, &dials);
                print!("  g={gap}: {:.3}", r.acc);
            }
            println!();
        }
    }
    // Saturated-judge selection versus the ground-truth checker.
    let mut mismatches = 0;
    for i in 0..200u64 {
        let b = Bench::new(seed, i, 1.4, 1e3, 0.0);
        let check = |completion: &[prism_core::Token]| executor_check(&b.task, completion);
        let mut drivers = b.drivers();
        drivers.executor = Some(&check);
        let cfg = HtsConfig {
            initial_width: 16,
            survivors: 2,
            target_width: 8,
            commit_threshold: 1.0,
            ..base_cfg(task_seed(seed, i))
        };
        let out = run_hts(&cfg, &drivers, SelectionStrategy::Svf).unwrap();
        let ledger = NfeLedger::new();
        let ctx = SelectionContext::from_drivers(&drivers, &ledger, Stage::Standalone);
        let by_exec = select_final(&out.pool, SelectionStrategy::Executor, &ctx).unwrap();
        if by_exec.sequence != out.selection.sequence || by_exec.lineage != out.selection.lineage {
            mismatches += 1;
        }
    }
    println!("saturated-gap vs executor mismatches: {mismatches}/200");
}

/// Full-scale replication of the efficiency comparison: 3 seeds x 200 tasks.
fn verify_gap() {
    let tasks = 200;
    for seed in [101u64, 202, 303] {
        print!("seed {seed}:");
        for gap in [0.0, 1.0, 2.0, 4.0] {
            let dials = SearchDials {
                wmax: 0.95,
                interval: 3,
                subset: 0.5,
                gap,
                noise_sd: 1.5,
                ..SearchDials::default()
            };
            let r = bench_search(seed, tasks, 0.8, &dials);
            print!("  g={gap}: {:.3}", r.acc);
        }
        println!();
    }
}

fn verify_eff() {
    let tasks = 200;
    for interval in [3u32, 4] {
        println!("interval {interval}:");
        for seed in [101u64, 202, 303] {
            let (bacc, bnfe) = bench_bst16(seed, tasks, 0.3);
            print!("  seed {seed}: bst16 {bacc:.3}/{bnfe:.0}");
            for k in [2usize, 4, 8] {
                let dials = SearchDials {
                    wmax: 0.95,
                    interval,
                    k,
                    subset: 0.5,
                    ..SearchDials::default()
                };
                let r = bench_search(seed, tasks, 0.3, &dials);
                print!(
                    "  K{k} {:.3}/{:.0} ({:.1}%)",
                    r.acc,
                    r.nfe,
                    100.0 * r.nfe / bnfe
                );
            }
            println!();
        }
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "eff".into());
    match mode.as_str() {
        "eff" => eff_table(),
        "gap" => gap_table(),
        "verify" => verify_eff(),
        "gapverify" => verify_gap(),
        other => eprintln!("unknown mode {other}; use eff, gap, verify, or gapverify"),
    }
}
