//! Idealised classifier-chain analysis of patience-based early exit.
//!
//! Binary task, `n` heads whose correctness events are independent: heads
//! `1..n−1` err with probability `q`, the final head with probability `p`.
//! Three closed-form sufficient conditions for the patience rule to beat
//! final-head-only inference circulate for this model and they disagree in
//! their constants, so all of them are exposed side by side together with
//! the intermediate inequality they are derived from. A seeded Monte Carlo
//! simulator measures the real quantities.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Step of the accuracy lower-bound bisection.
pub const LOWER_BOUND_TOLERANCE: f64 = 0.005;

/// Chain length, patience and error rates of the idealised model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub n: usize,
    pub t: usize,
    /// Error rate of the final (and of the original single-exit) classifier.
    pub p: f64,
    /// Error rate shared by every internal classifier.
    pub q: f64,
}

impl BoundParams {
    pub fn new(n: usize, t: usize, p: f64, q: f64) -> Result<Self> {
        let bp = BoundParams { n, t, p, q };
        bp.validate()?;
        Ok(bp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.t >= self.n {
            return Err(Error::Argument(format!(
                "patience must satisfy 1 <= t < n, got t={} n={}",
                self.t, self.n
            )));
        }
        for (name, v) in [("p", self.p), ("q", self.q)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Argument(format!(
                    "{name} must lie strictly between 0 and 1, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `lhs < rhs`, with both sides kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inequality {
    pub lhs: f64,
    pub rhs: f64,
}

impl Inequality {
    pub fn holds(&self) -> bool {
        self.lhs < self.rhs
    }
}

fn chain_slack(bp: &BoundParams) -> f64 {
    (bp.n - bp.t) as f64
}

/// `n − t < (1/(2q))^t · (p/q) − p`, the condition as stated with the theorem.
pub fn theorem_form(bp: &BoundParams) -> Inequality {
    Inequality {
        lhs: chain_slack(bp),
        rhs: libm::pow(1.0 / (2.0 * bp.q), bp.t as f64) * (bp.p / bp.q) - bp.p,
    }
}

/// `n − t < (1/(2q))^t · (p/q) − q`, the condition the proof arrives at.
pub fn proof_form(bp: &BoundParams) -> Inequality {
    Inequality {
        lhs: chain_slack(bp),
        rhs: libm::pow(1.0 / (2.0 * bp.q), bp.t as f64) * (bp.p / bp.q) - bp.q,
    }
}

/// `n − t < (1/(2q))^(t+1) · p − q`, the condition the proof announces.
pub fn opening_form(bp: &BoundParams) -> Inequality {
    Inequality {
        lhs: chain_slack(bp),
        rhs: libm::pow(1.0 / (2.0 * bp.q), (bp.t + 1) as f64) * bp.p - bp.q,
    }
}

/// `(n−t)·q^(t+1) − (n−t−1)·q^(t+2) < (1/2)^t · p`: the misclassify-on-stop
/// upper bound against the stop-probability lower bound scaled by `p`.
pub fn intermediate_bound(bp: &BoundParams) -> Inequality {
    let t = bp.t as f64;
    let slack = chain_slack(bp);
    Inequality {
        lhs: slack * libm::pow(bp.q, t + 1.0) - (slack - 1.0) * libm::pow(bp.q, t + 2.0),
        rhs: libm::pow(0.5, t) * bp.p,
    }
}

pub fn theorem1_holds(bp: &BoundParams) -> Result<bool> {
    bp.validate()?;
    Ok(theorem_form(bp).holds())
}

pub fn proof_form_holds(bp: &BoundParams) -> Result<bool> {
    bp.validate()?;
    Ok(proof_form(bp).holds())
}

pub fn opening_form_holds(bp: &BoundParams) -> Result<bool> {
    bp.validate()?;
    Ok(opening_form(bp).holds())
}

pub fn intermediate_bound_holds(bp: &BoundParams) -> Result<bool> {
    bp.validate()?;
    Ok(intermediate_bound(bp).holds())
}

/// Lower bound on the stop probability from a streak starting at the first
/// head: `q^(t+1) + (1−q)^(t+1)`.
pub fn stop_probability_floor(q: f64, t: usize) -> f64 {
    libm::pow(q, (t + 1) as f64) + libm::pow(1.0 - q, (t + 1) as f64)
}

/// Monte Carlo configuration. `q` and `p` are error probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub t: usize,
    pub q: f64,
    pub p: f64,
    pub trials: u64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 classifiers, got {}",
                self.n
            )));
        }
        if self.t == 0 {
            return Err(Error::Argument("patience must be >= 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::Argument("trials must be >= 1".into()));
        }
        for (name, v) in [("q", self.q), ("p", self.p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Argument(format!(
                    "{name} must be a probability, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Integer tallies of a batch of trials; merging is order-insensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimCounts {
    pub trials: u64,
    pub pabee_correct: u64,
    pub conventional_correct: u64,
    pub stopped: u64,
}

impl SimCounts {
    pub fn merge(self, other: SimCounts) -> SimCounts {
        SimCounts {
            trials: self.trials + other.trials,
            pabee_correct: self.pabee_correct + other.pabee_correct,
            conventional_correct: self.conventional_correct + other.conventional_correct,
            stopped: self.stopped + other.stopped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOutcome {
    pub acc_pabee: f64,
    pub acc_conventional: f64,
    /// Fraction of trials that stopped before the final classifier.
    pub stop_fraction: f64,
    pub trials: u64,
    pub seed: u64,
}

impl SimOutcome {
    pub fn from_counts(counts: SimCounts, seed: u64) -> Self {
        let total = counts.trials as f64;
        SimOutcome {
            acc_pabee: counts.pabee_correct as f64 / total,
            acc_conventional: counts.conventional_correct as f64 / total,
            stop_fraction: counts.stopped as f64 / total,
            trials: counts.trials,
            seed,
        }
    }
}

/// Uniform stream of one trial, independent of every other trial.
fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Outcome of the patience rule on one chain of correctness draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainResult {
    /// 1-based exit layer.
    pub exit_layer: usize,
    pub correct: bool,
    /// The rule fired (at any layer, including the last).
    pub fired: bool,
}

/// Applies the patience counter to a binary chain where `correct[i]` says
/// whether head `i + 1` predicted the true label. In the binary setting two
/// heads agree exactly when both are right or both are wrong.
pub fn run_chain(correct: &[bool], t: usize) -> ChainResult {
    let mut cnt = 0usize;
    for (i, &c) in correct.iter().enumerate() {
        if i > 0 {
            cnt = if c == correct[i - 1] { cnt + 1 } else { 0 };
        }
        if cnt == t {
            return ChainResult {
                exit_layer: i + 1,
                correct: c,
                fired: true,
            };
        }
    }
    ChainResult {
        exit_layer: correct.len(),
        correct: *correct.last().unwrap_or(&false),
        fired: false,
    }
}

/// Simulates the trials with indices in `range`.
pub fn simulate_trials(cfg: &SimConfig, range: Range<u64>) -> SimCounts {
    let mut counts = SimCounts::default();
    let mut chain = alloc::vec![false; cfg.n];
    for trial in range {
        let mut rng = trial_rng(cfg.seed, trial);
        for (i, slot) in chain.iter_mut().enumerate() {
            let error = if i + 1 == cfg.n { cfg.p } else { cfg.q };
            *slot = rng.random::<f64>() >= error;
        }
        let result = run_chain(&chain, cfg.t);
        counts.trials += 1;
        counts.pabee_correct += u64::from(result.correct);
        counts.conventional_correct += u64::from(chain[cfg.n - 1]);
        counts.stopped += u64::from(result.exit_layer < cfg.n);
    }
    counts
}

/// Runs `cfg.trials` independent chains.
pub fn simulate_pabee(cfg: &SimConfig) -> Result<SimOutcome> {
    cfg.validate()?;
    Ok(SimOutcome::from_counts(
        simulate_trials(cfg, 0..cfg.trials),
        cfg.seed,
    ))
}

/// Pre-drawn uniforms for antithetic pairs of chains: trial `2k` uses the
/// draws of stream `k` and trial `2k + 1` uses their complements.
struct PairedDraws {
    n: usize,
    trials: usize,
    uniforms: Vec<f64>,
}

impl PairedDraws {
    fn new(n: usize, trials: u64, seed: u64) -> Self {
        let pairs = trials.div_ceil(2);
        let mut uniforms = Vec::with_capacity(pairs as usize * n);
        for k in 0..pairs {
            let mut rng = trial_rng(seed, k);
            uniforms.extend((0..n).map(|_| rng.random::<f64>()));
        }
        PairedDraws {
            n,
            trials: trials as usize,
            uniforms,
        }
    }

    fn draw(&self, trial: usize, layer: usize) -> f64 {
        let u = self.uniforms[(trial / 2) * self.n + layer];
        if trial.is_multiple_of(2) {
            u
        } else {
            1.0 - u
        }
    }

    /// Trials in which the final head is right when it has accuracy `accuracy`.
    fn conventional_correct(&self, accuracy: f64) -> u64 {
        (0..self.trials)
            .filter(|&k| self.draw(k, self.n - 1) >= 1.0 - accuracy)
            .count() as u64
    }

    /// Trials the patience rule gets right when every head has accuracy `accuracy`.
    fn pabee_correct(&self, t: usize, accuracy: f64) -> u64 {
        let error = 1.0 - accuracy;
        let mut chain = alloc::vec![false; self.n];
        let mut correct = 0;
        for k in 0..self.trials {
            for (i, slot) in chain.iter_mut().enumerate() {
                *slot = self.draw(k, i) >= error;
            }
            correct += u64::from(run_chain(&chain, t).correct);
        }
        correct
    }
}

/// Smallest per-head accuracy at which the patience rule (all heads equally
/// accurate) matches a single classifier of accuracy `target`.
///
/// Both sides are estimated on the same antithetic pairs of draws, so the
/// comparison is paired and exact at the random-guessing end. The search
/// bisects `[0.5, 1.0]` to [`LOWER_BOUND_TOLERANCE`] and returns the
/// smallest accuracy found to meet the target.
pub fn accuracy_lower_bound(
    n: usize,
    t: usize,
    target_accuracy: f64,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    if t == 0 || t >= n {
        return Err(Error::Argument(format!(
            "patience must satisfy 1 <= t < n, got t={t} n={n}"
        )));
    }
    if !(0.5..=1.0).contains(&target_accuracy) {
        return Err(Error::Argument(format!(
            "target accuracy must lie in [0.5, 1.0], got {target_accuracy}"
        )));
    }
    if trials == 0 {
        return Err(Error::Argument("trials must be >= 1".into()));
    }
    let draws = PairedDraws::new(n, trials, seed);
    search_lower_bound(&draws, t, target_accuracy)
}

fn search_lower_bound(draws: &PairedDraws, t: usize, target: f64) -> Result<f64> {
    let baseline = draws.conventional_correct(target);
    let meets = |a: f64| draws.pabee_correct(t, a) >= baseline;
    let mut lo = 0.5;
    if meets(lo) {
        return Ok(lo);
    }
    let mut hi = if meets(target) {
        target
    } else if meets(1.0) {
        1.0
    } else {
        return Err(Error::Search(format!(
            "target {target} not reached even by perfect classifiers"
        )));
    };
    while hi - lo > LOWER_BOUND_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if meets(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// One cell of the lower-bound surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBoundRow {
    pub target_accuracy: f64,
    pub t: usize,
    pub lower_bound: f64,
}

/// Target accuracies `start, start + step, …` up to `stop` inclusive, built
/// from integer multiples of `step` to avoid drift.
pub fn accuracy_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || stop < start {
        return Err(Error::Argument(format!("bad grid {start}:{stop}:{step}")));
    }
    let count = libm::round((stop - start) / step) as usize;
    Ok((0..=count)
        .map(|k| libm::round((start + k as f64 * step) * 1e9) / 1e9)
        .collect())
}

/// The full surface: every target in `targets` crossed with every patience
/// in `patience`, all cells sharing one set of draws.
pub fn lower_bound_grid(
    n: usize,
    targets: &[f64],
    patience: &[usize],
    trials: u64,
    seed: u64,
) -> Result<Vec<LowerBoundRow>> {
    let mut rows = Vec::with_capacity(targets.len() * patience.len());
    for &target in targets {
        for &t in patience {
            rows.push(LowerBoundRow {
                target_accuracy: target,
                t,
                lower_bound: accuracy_lower_bound(n, t, target, trials, seed)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bp(n: usize, t: usize, p: f64, q: f64) -> BoundParams {
        BoundParams::new(n, t, p, q).unwrap()
    }

    #[test]
    fn worked_example_switches_at_four() {
        for t in 1..=11 {
            assert_eq!(
                theorem1_holds(&bp(12, t, 0.1, 0.2)).unwrap(),
                t >= 4,
                "t={t}"
            );
        }
    }

    #[test]
    fn theorem_form_values() {
        let f = theorem_form(&bp(12, 11, 0.1, 0.2));
        assert_eq!(f.lhs, 1.0);
        // 2.5^11 · 0.5 − 0.1
        assert!((f.rhs - 11920.8289550781).abs() < 1e-6, "{}", f.rhs);
        assert!(f.holds());
        // (2.5^4)(0.5) − 0.2
        let f = proof_form(&bp(12, 4, 0.1, 0.2));
        assert!((f.rhs - 19.33125).abs() < 1e-9);
        assert!(f.holds());
    }

    #[test]
    fn forms_coincide_when_p_equals_q() {
        for t in 1..8 {
            let b = bp(12, t, 0.3, 0.3);
            assert_eq!(theorem_form(&b), proof_form(&b));
            // special case n − t < (1/(2p))^t − p
            let expected = libm::pow(1.0 / 0.6, t as f64) - 0.3;
            assert!((theorem_form(&b).rhs - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn forms_order_by_p_and_q() {
        let b = bp(12, 1, 0.45, 0.4);
        // p > q: −q > −p
        assert!(proof_form(&b).rhs > theorem_form(&b).rhs);
        let b = bp(12, 1, 0.3, 0.4);
        assert!(proof_form(&b).rhs < theorem_form(&b).rhs);
    }

    #[test]
    fn intermediate_examples() {
        let f = intermediate_bound(&bp(12, 4, 0.1, 0.2));
        assert!((f.lhs - 0.002112).abs() < 1e-9, "{}", f.lhs);
        assert!((f.rhs - 0.00625).abs() < 1e-15);
        assert!(f.holds());
        // 11·0.5² − 10·0.5³
        let f = intermediate_bound(&bp(12, 1, 0.5, 0.5));
        assert!((f.lhs - 1.5).abs() < 1e-12);
        assert_eq!(f.rhs, 0.25);
        assert!(!f.holds());
    }

    #[test]
    fn intermediate_holds_near_full_patience() {
        // at t = n − 1 the left side is q^n, so the bound holds iff p > 2q·(2q)^(n−1)
        for &(q, p) in &[(0.1, 0.1), (0.3, 0.2), (0.45, 0.3), (0.2, 0.05), (0.5, 0.5)] {
            let b = bp(12, 11, p, q);
            assert!((intermediate_bound(&b).lhs - libm::pow(q, 12.0)).abs() < 1e-18);
            let expected = p > 2.0 * q * libm::pow(2.0 * q, 11.0);
            assert_eq!(
                intermediate_bound_holds(&b).unwrap(),
                expected,
                "q={q} p={p}"
            );
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(BoundParams::new(12, 4, 0.1, 0.0).is_err());
        assert!(BoundParams::new(12, 12, 0.1, 0.2).is_err());
        assert!(BoundParams::new(12, 0, 0.1, 0.2).is_err());
        assert!(BoundParams::new(12, 3, 1.0, 0.2).is_err());
        let raw = BoundParams {
            n: 12,
            t: 3,
            p: 0.1,
            q: 0.0,
        };
        assert!(theorem1_holds(&raw).is_err());
    }

    #[test]
    fn run_chain_examples() {
        let r = run_chain(&[true, true, false, false, false], 2);
        assert_eq!(
            r,
            ChainResult {
                exit_layer: 5,
                correct: false,
                fired: true
            }
        );
        let r = run_chain(&[true, false, true], 5);
        assert_eq!(
            r,
            ChainResult {
                exit_layer: 3,
                correct: true,
                fired: false
            }
        );
    }

    #[test]
    fn perfect_internal_heads() {
        for t in 1..11 {
            let cfg = SimConfig {
                n: 12,
                t,
                q: 0.0,
                p: 0.3,
                trials: 2000,
                seed: 5,
            };
            assert_eq!(simulate_pabee(&cfg).unwrap().acc_pabee, 1.0, "t={t}");
        }
    }

    #[test]
    fn patience_at_least_n_equals_conventional() {
        for t in [12, 13, 40] {
            let cfg = SimConfig {
                n: 12,
                t,
                q: 0.3,
                p: 0.2,
                trials: 5000,
                seed: 1,
            };
            let out = simulate_pabee(&cfg).unwrap();
            assert_eq!(out.acc_pabee, out.acc_conventional);
            assert_eq!(out.stop_fraction, 0.0);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_split_invariant() {
        let cfg = SimConfig {
            n: 12,
            t: 3,
            q: 0.2,
            p: 0.2,
            trials: 3000,
            seed: 77,
        };
        assert_eq!(simulate_pabee(&cfg).unwrap(), simulate_pabee(&cfg).unwrap());
        let whole = simulate_trials(&cfg, 0..3000);
        let split = simulate_trials(&cfg, 1700..3000).merge(simulate_trials(&cfg, 0..1700));
        assert_eq!(whole, split);
    }

    #[test]
    fn sim_rejects_zero_trials() {
        let cfg = SimConfig {
            n: 12,
            t: 3,
            q: 0.2,
            p: 0.2,
            trials: 0,
            seed: 0,
        };
        assert!(simulate_pabee(&cfg).is_err());
    }

    #[test]
    fn lower_bound_at_random_guessing() {
        for t in 1..12 {
            assert_eq!(accuracy_lower_bound(12, t, 0.5, 1000, 3).unwrap(), 0.5);
        }
    }

    #[test]
    fn lower_bound_preconditions() {
        assert!(accuracy_lower_bound(12, 0, 0.8, 100, 0).is_err());
        assert!(accuracy_lower_bound(12, 12, 0.8, 100, 0).is_err());
        assert!(accuracy_lower_bound(12, 3, 1.2, 100, 0).is_err());
        assert!(accuracy_lower_bound(12, 3, 0.8, 0, 0).is_err());
    }

    #[test]
    fn grid_is_drift_free() {
        let g = accuracy_grid(0.5, 1.0, 0.01).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 0.5);
        assert_eq!(g[30], 0.8);
        assert_eq!(g[50], 1.0);
    }
}
