//! Experiment orchestration: train (or load), evaluate policies, sweep
//! patience, compare exit criteria, and write the CSV outputs.
//!
//! Output files, all under the run directory:
//!
//! | file | columns |
//! |------|---------|
//! | `config.txt` | the effective configuration |
//! | `checkpoint_seed{s}.ckpt` | model parameters |
//! | `loss_history_seed{s}.csv` | `epoch,loss` |
//! | `eval_seed{s}.csv` | `policy,accuracy_or_mse,speedup,exit_histogram` |
//! | `sweep_seed{s}.csv` | `t,accuracy_or_mse,speedup,exit_histogram` |
//! | `criteria_seed{s}.csv` | `policy,hyperparameter,accuracy_or_mse,speedup` |
//! | `sweep_median.csv` | `t,accuracy_or_mse,speedup` (median over seeds) |
//! | `criteria_median.csv` | `policy,hyperparameter,accuracy_or_mse,speedup` |
//! | `manifest.csv` | `file,sha256` for every file above |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pabee_core::data::gen_synthetic;
use pabee_core::inference::{histogram_field, EvalReport, InferenceTrace};
use pabee_core::model::{
    forward_all, train, LabeledDataset, ModelParams, PredictionOutput, Targets,
};
use pabee_core::policy::{PolicyConfig, Prediction, DEFAULT_TAU};
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::csv::{self, Table};
use crate::error::{Error, Result};

/// Builds the worker pool; `None` means one thread per core.
pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let threads = workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start {threads} workers: {e}")))
}

/// Every head output of every instance, computed once so that many policies
/// can be scored without repeating the forward pass. Replaying a policy over
/// the cache gives exactly the trace `run_instance` would produce.
pub struct HeadCache {
    num_layers: usize,
    outputs: Vec<Vec<PredictionOutput>>,
    targets: Targets,
}

impl HeadCache {
    pub fn build(params: &ModelParams, data: &LabeledDataset) -> Result<Self> {
        data.check_task(params.config.task, params.config.input_dim)?;
        let outputs = (0..data.len())
            .into_par_iter()
            .map(|i| forward_all(params, data.input(i)).map(|pass| pass.outputs))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(HeadCache {
            num_layers: params.num_layers(),
            outputs,
            targets: data.targets().clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn trace(
        &self,
        instance: usize,
        policy: &PolicyConfig,
    ) -> pabee_core::Result<InferenceTrace> {
        policy.validate()?;
        let outputs = &self.outputs[instance];
        let mut monitor = policy.start();
        for (i, out) in outputs.iter().enumerate() {
            let fired = monitor.observe(out)?;
            if fired || i + 1 == outputs.len() {
                return Ok(InferenceTrace {
                    exit_layer: i + 1,
                    prediction: Prediction::of(out),
                    per_layer_outputs: outputs[..=i].to_vec(),
                    exited_early: fired,
                });
            }
        }
        unreachable!("models have at least two layers")
    }

    pub fn evaluate(&self, policy: &PolicyConfig) -> Result<EvalReport> {
        let traces = (0..self.len())
            .map(|i| self.trace(i, policy))
            .collect::<pabee_core::Result<Vec<_>>>()?;
        Ok(EvalReport::from_traces(
            self.num_layers,
            &traces,
            &self.targets,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub t: usize,
    pub report: EvalReport,
}

/// One point of a speed-quality curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub policy: &'static str,
    pub hyperparameter: f64,
    pub metric: f64,
    pub speedup: f64,
}

fn check_patience_range(num_layers: usize, (lo, hi): (usize, usize)) -> Result<()> {
    if lo == 0 || lo > hi || hi >= num_layers {
        return Err(Error::bad_value(
            "sweep.patience",
            format!("range {lo}:{hi} must lie within [1, {}]", num_layers - 1),
        ));
    }
    Ok(())
}

fn sweep_cached(cache: &HeadCache, range: (usize, usize)) -> Result<Vec<SweepRow>> {
    check_patience_range(cache.num_layers, range)?;
    (range.0..=range.1)
        .into_par_iter()
        .map(|t| {
            Ok(SweepRow {
                t,
                report: cache.evaluate(&PolicyConfig::patience(t))?,
            })
        })
        .collect()
}

/// One report per patience in `range` (inclusive), ascending in `t`.
pub fn sweep_patience(
    params: &ModelParams,
    data: &LabeledDataset,
    range: (usize, usize),
) -> Result<Vec<SweepRow>> {
    check_patience_range(params.num_layers(), range)?;
    sweep_cached(&HeadCache::build(params, data)?, range)
}

fn compare_cached(
    cache: &HeadCache,
    patience: (usize, usize),
    entropy: &[f64],
    maxprob: &[f64],
) -> Result<Vec<CurvePoint>> {
    check_patience_range(cache.num_layers, patience)?;
    if entropy.is_empty() || maxprob.is_empty() {
        return Err(Error::Invalid("threshold grids must not be empty".into()));
    }
    let policies: Vec<(f64, PolicyConfig)> = (patience.0..=patience.1)
        .map(|t| {
            (
                t as f64,
                PolicyConfig::Patience {
                    t,
                    tau: DEFAULT_TAU,
                },
            )
        })
        .chain(
            entropy
                .iter()
                .map(|&threshold| (threshold, PolicyConfig::Entropy { threshold })),
        )
        .chain(
            maxprob
                .iter()
                .map(|&threshold| (threshold, PolicyConfig::MaxProb { threshold })),
        )
        .collect();
    policies
        .par_iter()
        .map(|(hyperparameter, policy)| {
            let report = cache.evaluate(policy)?;
            Ok(CurvePoint {
                policy: policy.kind(),
                hyperparameter: *hyperparameter,
                metric: report.metric.value(),
                speedup: report.speedup,
            })
        })
        .collect()
}

/// Speed-quality table for patience, entropy and max-probability exits.
/// Rows are grouped by policy in that order, each in grid order.
pub fn compare_criteria(
    params: &ModelParams,
    data: &LabeledDataset,
    patience: (usize, usize),
    entropy: &[f64],
    maxprob: &[f64],
) -> Result<Vec<CurvePoint>> {
    check_patience_range(params.num_layers(), patience)?;
    compare_cached(&HeadCache::build(params, data)?, patience, entropy, maxprob)
}

/// Which evaluations [`run_experiment`] performs after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub evaluate: bool,
    pub sweep: bool,
    pub compare: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        evaluate: true,
        sweep: true,
        compare: true,
    };
    pub const TRAIN_ONLY: Stages = Stages {
        evaluate: false,
        sweep: false,
        compare: false,
    };
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub params: ModelParams,
    /// Empty when the model came from a checkpoint.
    pub loss_history: Vec<f64>,
    pub evals: Vec<(PolicyConfig, EvalReport)>,
    pub sweep: Vec<SweepRow>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianSweepRow {
    pub t: usize,
    pub metric: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedResult>,
    pub sweep_median: Vec<MedianSweepRow>,
    pub curve_median: Vec<CurvePoint>,
    /// `(file name, sha256)` sorted by name.
    pub manifest: Vec<(String, String)>,
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn train_seed(
    cfg: &ExperimentConfig,
    data: &LabeledDataset,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    let init = ModelParams::init(cfg.stack_config(seed))?;
    match train(&init, data, &cfg.optimizer) {
        Ok(outcome) => Ok((outcome.params, outcome.loss_history)),
        Err(source @ (pabee_core::Error::Divergence { .. } | pabee_core::Error::Numeric(_))) => {
            Err(Error::Training {
                seed,
                config: cfg.to_text(),
                source,
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn evaluate_seed(
    cfg: &ExperimentConfig,
    stages: Stages,
    eval: &LabeledDataset,
    seed: u64,
    params: ModelParams,
    loss_history: Vec<f64>,
) -> Result<SeedResult> {
    let mut result = SeedResult {
        seed,
        params,
        loss_history,
        evals: Vec::new(),
        sweep: Vec::new(),
        curve: Vec::new(),
    };
    if stages == Stages::TRAIN_ONLY {
        return Ok(result);
    }
    let cache = HeadCache::build(&result.params, eval)?;
    if stages.evaluate {
        result.evals = cfg
            .policies
            .iter()
            .map(|p| Ok((*p, cache.evaluate(p)?)))
            .collect::<Result<_>>()?;
    }
    if stages.sweep {
        result.sweep = sweep_cached(&cache, cfg.patience_range(result.params.num_layers()))?;
    }
    if stages.compare {
        let range = cfg.patience_range(result.params.num_layers());
        result.curve = compare_cached(&cache, range, &cfg.sweep.entropy, &cfg.sweep.maxprob)?;
    }
    Ok(result)
}

/// Trains one model per seed (or loads `run.checkpoint`), runs the requested
/// stages on the evaluation split and writes every output under
/// `run.output_dir`. Configuration problems are reported before any
/// training starts. `progress` receives one line per completed step.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    stages: Stages,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let classification = cfg.dataset.spec().kind.task().is_classification();
    if stages.compare && !classification {
        return Err(Error::Invalid(
            "criteria comparison needs a classification dataset".into(),
        ));
    }
    let out_dir = cfg
        .run
        .output_dir
        .clone()
        .ok_or_else(|| Error::Invalid("run.output_dir is not set".into()))?;
    let loaded = match &cfg.run.checkpoint {
        Some(path) => {
            let params = checkpoint::load(path)?;
            check_patience_range(params.num_layers(), cfg.patience_range(params.num_layers()))?;
            Some(params)
        }
        None => None,
    };
    let pool = worker_pool(cfg.run.workers)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let (train_data, eval_data) = gen_synthetic(&cfg.dataset.spec())?;
    if let Some(params) = &loaded {
        eval_data.check_task(params.config.task, params.config.input_dim)?;
    }
    let seeds = match &loaded {
        Some(p) => vec![p.config.seed],
        None => cfg.seeds(),
    };

    let results = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let (params, history) = match &loaded {
                    Some(p) => (p.clone(), Vec::new()),
                    None => {
                        let trained = train_seed(cfg, &train_data, seed)?;
                        progress(&format!(
                            "seed {seed}: trained {} epochs, final loss {}",
                            trained.1.len(),
                            trained.1.last().copied().unwrap_or(f64::NAN)
                        ));
                        trained
                    }
                };
                let result = evaluate_seed(cfg, stages, &eval_data, seed, params, history)?;
                progress(&format!("seed {seed}: evaluation done"));
                Ok(result)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let sweep_median = median_sweep(&results);
    let curve_median = median_curve(&results);
    let files = render_outputs(
        cfg,
        &results,
        &sweep_median,
        &curve_median,
        loaded.is_none(),
    );
    let manifest = write_outputs(&out_dir, files)?;
    Ok(ExperimentReport {
        out_dir,
        seeds: results,
        sweep_median,
        curve_median,
        manifest,
    })
}

fn median_sweep(results: &[SeedResult]) -> Vec<MedianSweepRow> {
    let Some(first) = results.first() else {
        return Vec::new();
    };
    (0..first.sweep.len())
        .map(|i| {
            let metric: Vec<f64> = results
                .iter()
                .map(|r| r.sweep[i].report.metric.value())
                .collect();
            let speedup: Vec<f64> = results.iter().map(|r| r.sweep[i].report.speedup).collect();
            MedianSweepRow {
                t: first.sweep[i].t,
                metric: median(&metric),
                speedup: median(&speedup),
            }
        })
        .collect()
}

fn median_curve(results: &[SeedResult]) -> Vec<CurvePoint> {
    let Some(first) = results.first() else {
        return Vec::new();
    };
    (0..first.curve.len())
        .map(|i| {
            let metric: Vec<f64> = results.iter().map(|r| r.curve[i].metric).collect();
            let speedup: Vec<f64> = results.iter().map(|r| r.curve[i].speedup).collect();
            CurvePoint {
                metric: median(&metric),
                speedup: median(&speedup),
                ..first.curve[i].clone()
            }
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut table = Table::new(&["t", "accuracy_or_mse", "speedup", "exit_histogram"]);
    for row in rows {
        table.push(vec![
            row.t.to_string(),
            row.report.metric.value().to_string(),
            row.report.speedup.to_string(),
            histogram_field(&row.report.exit_histogram),
        ]);
    }
    table
}

pub fn criteria_table(points: &[CurvePoint]) -> Table {
    let mut table = Table::new(&["policy", "hyperparameter", "accuracy_or_mse", "speedup"]);
    for p in points {
        table.push(vec![
            p.policy.to_string(),
            p.hyperparameter.to_string(),
            p.metric.to_string(),
            p.speedup.to_string(),
        ]);
    }
    table
}

pub fn eval_table(evals: &[(PolicyConfig, EvalReport)]) -> Table {
    let mut table = Table::new(&["policy", "accuracy_or_mse", "speedup", "exit_histogram"]);
    for (policy, report) in evals {
        table.push(vec![
            policy.descriptor(),
            report.metric.value().to_string(),
            report.speedup.to_string(),
            histogram_field(&report.exit_histogram),
        ]);
    }
    table
}

pub fn loss_table(history: &[f64]) -> Table {
    let mut table = Table::new(&["epoch", "loss"]);
    for (i, loss) in history.iter().enumerate() {
        table.push(vec![(i + 1).to_string(), loss.to_string()]);
    }
    table
}

fn render_outputs(
    cfg: &ExperimentConfig,
    results: &[SeedResult],
    sweep_median: &[MedianSweepRow],
    curve_median: &[CurvePoint],
    trained: bool,
) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    files.insert("config.txt".to_string(), cfg.to_text());
    for r in results {
        let s = r.seed;
        if trained {
            files.insert(
                format!("checkpoint_seed{s}.ckpt"),
                checkpoint::encode(&r.params),
            );
            files.insert(
                format!("loss_history_seed{s}.csv"),
                loss_table(&r.loss_history).render(),
            );
        }
        if !r.evals.is_empty() {
            files.insert(format!("eval_seed{s}.csv"), eval_table(&r.evals).render());
        }
        if !r.sweep.is_empty() {
            files.insert(format!("sweep_seed{s}.csv"), sweep_table(&r.sweep).render());
        }
        if !r.curve.is_empty() {
            files.insert(
                format!("criteria_seed{s}.csv"),
                criteria_table(&r.curve).render(),
            );
        }
    }
    if !sweep_median.is_empty() {
        let mut table = Table::new(&["t", "accuracy_or_mse", "speedup"]);
        for row in sweep_median {
            table.push(vec![
                row.t.to_string(),
                row.metric.to_string(),
                row.speedup.to_string(),
            ]);
        }
        files.insert("sweep_median.csv".to_string(), table.render());
    }
    if !curve_median.is_empty() {
        files.insert(
            "criteria_median.csv".to_string(),
            criteria_table(curve_median).render(),
        );
    }
    files
}

/// Writes files one at a time in name order, then the manifest.
fn write_outputs(dir: &Path, files: BTreeMap<String, String>) -> Result<Vec<(String, String)>> {
    let mut manifest = Vec::with_capacity(files.len());
    let mut table = Table::new(&["file", "sha256"]);
    for (name, contents) in files {
        csv::write(&dir.join(&name), &contents)?;
        let digest = csv::sha256_hex(contents.as_bytes());
        table.push(vec![name.clone(), digest.clone()]);
        manifest.push((name, digest));
    }
    csv::write(&dir.join("manifest.csv"), &table.render())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pabee_core::inference::evaluate;
    use pabee_core::model::{Nonlinearity, StackConfig, Task};

    fn small_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.num_train = 120;
        cfg.dataset.num_eval = 60;
        cfg.model.num_layers = 4;
        cfg.model.hidden_dim = 6;
        cfg.optimizer.epochs = 3;
        cfg.sweep.patience = Some((1, 3));
        cfg.sweep.entropy = vec![0.2, 0.6];
        cfg.sweep.maxprob = vec![0.7, 0.9];
        cfg.run.seeds = vec![1, 2];
        cfg.run.workers = Some(2);
        cfg.run.output_dir = Some(dir.to_path_buf());
        cfg
    }

    #[test]
    fn cache_replay_matches_run_instance() {
        let cfg = small_config(Path::new("unused"));
        let (_, eval) = gen_synthetic(&cfg.dataset.spec()).unwrap();
        let params = ModelParams::init(cfg.stack_config(3)).unwrap();
        let cache = HeadCache::build(&params, &eval).unwrap();
        for policy in [
            PolicyConfig::patience(1),
            PolicyConfig::patience(3),
            PolicyConfig::Entropy { threshold: 0.9 },
            PolicyConfig::MaxProb { threshold: 0.4 },
            PolicyConfig::FixedDepth { depth: 2 },
            PolicyConfig::Never,
        ] {
            assert_eq!(
                cache.evaluate(&policy).unwrap(),
                evaluate(&params, &policy, &eval).unwrap()
            );
        }
    }

    #[test]
    fn extreme_thresholds() {
        let cfg = small_config(Path::new("unused"));
        let (_, eval) = gen_synthetic(&cfg.dataset.spec()).unwrap();
        let params = ModelParams::init(cfg.stack_config(3)).unwrap();
        let ln_k = (3.0f64).ln();
        let curve = compare_criteria(&params, &eval, (1, 1), &[ln_k + 1e-9], &[1.0]).unwrap();
        assert_eq!(curve[1].policy, "entropy");
        assert_eq!(curve[1].speedup, 4.0);
        assert_eq!(curve[2].policy, "maxprob");
        assert_eq!(curve[2].speedup, 1.0);
    }

    #[test]
    fn sweep_rows_ascend_and_cost_is_monotone() {
        let params = ModelParams::init(StackConfig {
            input_dim: 2,
            hidden_dim: 5,
            num_layers: 6,
            task: Task::Classification { num_classes: 3 },
            nonlinearity: Nonlinearity::Tanh,
            seed: 4,
        })
        .unwrap();
        let cfg = small_config(Path::new("unused"));
        let (_, eval) = gen_synthetic(&cfg.dataset.spec()).unwrap();
        let rows = sweep_patience(&params, &eval, (1, 5)).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.t).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        for w in rows.windows(2) {
            assert!(w[0].report.average_exit_layer() <= w[1].report.average_exit_layer());
        }
        assert!(sweep_patience(&params, &eval, (1, 6)).is_err());
        assert!(sweep_patience(&params, &eval, (0, 2)).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn experiment_writes_manifest_and_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&small_config(a.path()), Stages::ALL, &|_| {}).unwrap();
        let mut cfg_b = small_config(b.path());
        cfg_b.run.workers = Some(1);
        cfg_b.run.output_dir = Some(b.path().to_path_buf());
        let rb = run_experiment(&cfg_b, Stages::ALL, &|_| {}).unwrap();
        let names: Vec<&str> = ra.manifest.iter().map(|(n, _)| n.as_str()).collect();
        for expected in [
            "checkpoint_seed1.ckpt",
            "checkpoint_seed2.ckpt",
            "criteria_median.csv",
            "sweep_seed2.csv",
            "loss_history_seed1.csv",
            "eval_seed1.csv",
        ] {
            assert!(names.contains(&expected), "{names:?}");
        }
        for (name, _) in &ra.manifest {
            if name == "config.txt" {
                continue;
            }
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
        assert_eq!(ra.seeds[1].params, rb.seeds[1].params);
        let loaded = checkpoint::load(&a.path().join("checkpoint_seed1.ckpt")).unwrap();
        assert_eq!(loaded, ra.seeds[0].params);
    }

    #[test]
    fn empty_policy_list_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("never-created");
        let mut cfg = small_config(&out);
        cfg.policies.clear();
        assert!(matches!(
            run_experiment(&cfg, Stages::ALL, &|_| {}),
            Err(Error::Invalid(_))
        ));
        assert!(!out.exists());
    }

    #[test]
    fn divergence_echoes_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.dataset.family = crate::config::DatasetFamily::RegressionWave;
        cfg.policies = vec![PolicyConfig::Never];
        cfg.model.nonlinearity = pabee_core::model::Nonlinearity::Relu;
        cfg.optimizer.learning_rate = 5.0;
        cfg.optimizer.epochs = 20;
        cfg.run.seeds = vec![5];
        let err = run_experiment(&cfg, Stages::TRAIN_ONLY, &|_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("optimizer.learning_rate = 5\n"));
    }
}
