//! Parallel drivers for the classifier-chain simulator and the accuracy
//! lower-bound search.
//!
//! Simulation rows: `n,t,q,p,trials,seed,acc_pabee,acc_conventional,stop_fraction`.
//! Lower-bound rows: `target_accuracy,t,lower_bound`.

use pabee_core::theory::{
    accuracy_lower_bound, simulate_trials, LowerBoundRow, SimConfig, SimCounts, SimOutcome,
};
use rayon::prelude::*;

use crate::csv::Table;
use crate::error::Result;

/// Trials per parallel task.
const CHUNK: u64 = 4096;

/// Same counts as `simulate_pabee` for any number of workers: each trial
/// draws from its own stream and the tallies are integers.
pub fn simulate_parallel(cfg: &SimConfig) -> Result<SimOutcome> {
    cfg.validate()?;
    let chunks = cfg.trials.div_ceil(CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| simulate_trials(cfg, c * CHUNK..((c + 1) * CHUNK).min(cfg.trials)))
        .reduce(SimCounts::default, SimCounts::merge);
    Ok(SimOutcome::from_counts(counts, cfg.seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub config: SimConfig,
    pub outcome: SimOutcome,
}

/// Error probabilities `(q, p)` for equally accurate heads of accuracy `a`.
pub fn equal_errors(accuracy: f64) -> (f64, f64) {
    let e = ((1.0 - accuracy) * 1e9).round() / 1e9;
    (e, e)
}

/// Every `(q, p)` pair crossed with every patience in `patience`, in that
/// nesting order.
pub fn simulate_grid(
    n: usize,
    errors: &[(f64, f64)],
    patience: &[usize],
    trials: u64,
    seed: u64,
) -> Result<Vec<SimRow>> {
    let configs: Vec<SimConfig> = errors
        .iter()
        .flat_map(|&(q, p)| {
            patience.iter().map(move |&t| SimConfig {
                n,
                t,
                q,
                p,
                trials,
                seed,
            })
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    configs
        .into_par_iter()
        .map(|config| {
            Ok(SimRow {
                config,
                outcome: simulate_parallel(&config)?,
            })
        })
        .collect()
}

pub fn simulation_table(rows: &[SimRow]) -> Table {
    let mut table = Table::new(&[
        "n",
        "t",
        "q",
        "p",
        "trials",
        "seed",
        "acc_pabee",
        "acc_conventional",
        "stop_fraction",
    ]);
    for r in rows {
        let c = &r.config;
        table.push(vec![
            c.n.to_string(),
            c.t.to_string(),
            c.q.to_string(),
            c.p.to_string(),
            c.trials.to_string(),
            c.seed.to_string(),
            r.outcome.acc_pabee.to_string(),
            r.outcome.acc_conventional.to_string(),
            r.outcome.stop_fraction.to_string(),
        ]);
    }
    table
}

/// The lower-bound surface, target-major, each cell searched in parallel.
pub fn lower_bound_surface(
    n: usize,
    targets: &[f64],
    patience: &[usize],
    trials: u64,
    seed: u64,
) -> Result<Vec<LowerBoundRow>> {
    let cells: Vec<(f64, usize)> = targets
        .iter()
        .flat_map(|&a| patience.iter().map(move |&t| (a, t)))
        .collect();
    Ok(cells
        .into_par_iter()
        .map(|(target_accuracy, t)| {
            Ok(LowerBoundRow {
                target_accuracy,
                t,
                lower_bound: accuracy_lower_bound(n, t, target_accuracy, trials, seed)?,
            })
        })
        .collect::<pabee_core::Result<Vec<_>>>()?)
}

pub fn lower_bound_table(rows: &[LowerBoundRow]) -> Table {
    let mut table = Table::new(&["target_accuracy", "t", "lower_bound"]);
    for r in rows {
        table.push(vec![
            r.target_accuracy.to_string(),
            r.t.to_string(),
            r.lower_bound.to_string(),
        ]);
    }
    table
}
