//! `pabee` command-line interface.
//!
//! Experiment subcommands (`train`, `eval`, `sweep`, `compare`) build an
//! [`ExperimentConfig`] from a preset, an optional config file and flags, in
//! that order of precedence (later wins). Every experiment flag is a
//! shorthand for one config key and `--set key=value` reaches any key.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pabee_core::data::gen_synthetic;
use pabee_core::theory::{
    intermediate_bound, opening_form, proof_form, stop_probability_floor, theorem_form,
    BoundParams, Inequality,
};

use crate::bench::{run_experiment, worker_pool, ExperimentReport, Stages};
use crate::config::{parse_grid, parse_range, ExperimentConfig, KEYS};
use crate::csv;
use crate::error::{exit_code, Error, Result};
use crate::sim::{
    equal_errors, lower_bound_surface, lower_bound_table, simulate_grid, simulation_table,
};
use crate::wallclock::wallclock_probe;

#[derive(Debug, Parser)]
#[command(
    name = "pabee",
    version,
    about = "Patience-based early-exit inference: training, evaluation, sweeps and theory checks",
    after_help = "Exit codes: 0 success, 1 invalid input, 2 computation failure, 3 I/O failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed; writes checkpoints and loss histories.
    Train(ExperimentArgs),
    /// Train (or load --checkpoint) and evaluate the configured policies.
    Eval(EvalArgs),
    /// Train (or load) and sweep the patience over sweep.patience.
    Sweep(ExperimentArgs),
    /// Train (or load) and tabulate patience, entropy and maxprob exits.
    Compare(ExperimentArgs),
    /// Monte Carlo simulation of a binary classifier chain.
    Simulate(SimulateArgs),
    /// Evaluate every form of the accuracy-improvement condition.
    Bound(BoundArgs),
    /// Smallest per-head accuracy that matches a target accuracy.
    Lowerbound(LowerBoundArgs),
    /// List every config-file key.
    Keys,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Gaussian blobs, 12 layers, patience sweep 1:11.
    Default,
    /// Two noisy spirals, 12 layers of width 32, seeds 1..5, 150 epochs.
    Diversity,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Starting configuration before the file and flags are applied.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Set any config key; repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// [config: run.output_dir] Run directory (default: runs/<unix-time>-seed<first seed>).
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// [config: run.seeds] Comma-separated model seeds.
    #[arg(long, value_name = "LIST")]
    pub seeds: Option<String>,
    /// [config: run.workers] Worker threads (default: number of cores).
    #[arg(long, value_name = "N")]
    pub workers: Option<String>,
    /// [config: run.checkpoint] Load this checkpoint instead of training.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<String>,

    /// [config: dataset.kind] gaussian_blobs | two_spirals | regression_wave.
    #[arg(long, value_name = "KIND")]
    pub dataset: Option<String>,
    /// [config: dataset.num_classes]
    #[arg(long, value_name = "K")]
    pub num_classes: Option<String>,
    /// [config: dataset.separation]
    #[arg(long, value_name = "X")]
    pub separation: Option<String>,
    /// [config: dataset.noise]
    #[arg(long, value_name = "X")]
    pub noise: Option<String>,
    /// [config: dataset.num_train]
    #[arg(long, value_name = "N")]
    pub num_train: Option<String>,
    /// [config: dataset.num_eval]
    #[arg(long, value_name = "N")]
    pub num_eval: Option<String>,
    /// [config: dataset.input_dim]
    #[arg(long, value_name = "N")]
    pub input_dim: Option<String>,
    /// [config: dataset.seed]
    #[arg(long, value_name = "SEED")]
    pub data_seed: Option<String>,

    /// [config: model.num_layers]
    #[arg(long, value_name = "N")]
    pub num_layers: Option<String>,
    /// [config: model.hidden_dim]
    #[arg(long, value_name = "N")]
    pub hidden_dim: Option<String>,
    /// [config: model.nonlinearity] tanh | relu.
    #[arg(long, value_name = "NAME")]
    pub nonlinearity: Option<String>,
    /// [config: model.seed] Used when --seeds is not given.
    #[arg(long, value_name = "SEED")]
    pub model_seed: Option<String>,

    /// [config: optimizer.learning_rate]
    #[arg(long, value_name = "X")]
    pub learning_rate: Option<String>,
    /// [config: optimizer.momentum]
    #[arg(long, value_name = "X")]
    pub momentum: Option<String>,
    /// [config: optimizer.batch_size]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<String>,
    /// [config: optimizer.epochs]
    #[arg(long, value_name = "N")]
    pub epochs: Option<String>,

    /// [config: sweep.patience] Inclusive range lo:hi.
    #[arg(long, value_name = "LO:HI")]
    pub patience: Option<String>,
    /// [config: sweep.entropy] List or start:stop:step.
    #[arg(long, value_name = "GRID")]
    pub entropy: Option<String>,
    /// [config: sweep.maxprob] List or start:stop:step.
    #[arg(long, value_name = "GRID")]
    pub maxprob: Option<String>,
}

impl ExperimentArgs {
    fn flag_assignments(&self) -> Vec<(String, String)> {
        let flags = [
            ("run.output_dir", &self.out),
            ("run.seeds", &self.seeds),
            ("run.workers", &self.workers),
            ("run.checkpoint", &self.checkpoint),
            ("dataset.kind", &self.dataset),
            ("dataset.num_classes", &self.num_classes),
            ("dataset.separation", &self.separation),
            ("dataset.noise", &self.noise),
            ("dataset.num_train", &self.num_train),
            ("dataset.num_eval", &self.num_eval),
            ("dataset.input_dim", &self.input_dim),
            ("dataset.seed", &self.data_seed),
            ("model.num_layers", &self.num_layers),
            ("model.hidden_dim", &self.hidden_dim),
            ("model.nonlinearity", &self.nonlinearity),
            ("model.seed", &self.model_seed),
            ("optimizer.learning_rate", &self.learning_rate),
            ("optimizer.momentum", &self.momentum),
            ("optimizer.batch_size", &self.batch_size),
            ("optimizer.epochs", &self.epochs),
            ("sweep.patience", &self.patience),
            ("sweep.entropy", &self.entropy),
            ("sweep.maxprob", &self.maxprob),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    /// Preset, then file, then flags, then `--set`.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match self.preset {
            Preset::Default => ExperimentConfig::default(),
            Preset::Diversity => ExperimentConfig::diversity_benchmark(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply(&self.flag_assignments())?;
        let mut overrides = Vec::with_capacity(self.set.len());
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got `{item}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        cfg.apply(&overrides)?;
        if cfg.run.output_dir.is_none() {
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let seed = cfg
                .run
                .checkpoint
                .as_ref()
                .map(|_| "ckpt".to_string())
                .unwrap_or_else(|| cfg.seeds()[0].to_string());
            cfg.run.output_dir = Some(PathBuf::from(format!("runs/{stamp}-seed{seed}")));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Also print the median per-instance wall-clock latency over this many
    /// passes (>= 3) for each policy.
    #[arg(long, value_name = "N")]
    pub latency_repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Classifiers in the chain.
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// Patience: a single value or an inclusive range lo:hi.
    #[arg(long, default_value = "6")]
    pub t: String,
    /// Error probability of every internal classifier.
    #[arg(long, conflicts_with = "acc_grid", requires = "p")]
    pub q: Option<f64>,
    /// Error probability of the final classifier.
    #[arg(long, conflicts_with = "acc_grid", requires = "q")]
    pub p: Option<f64>,
    /// Equal per-classifier accuracies start:stop:step (q = p = 1 - accuracy).
    #[arg(long, value_name = "GRID")]
    pub acc_grid: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: number of cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Write the CSV here instead of standard output.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// Patience: a single value or an inclusive range lo:hi.
    #[arg(long)]
    pub t: String,
    /// Error probability of the final classifier.
    #[arg(long)]
    pub p: f64,
    /// Error probability of every internal classifier.
    #[arg(long)]
    pub q: f64,
}

#[derive(Debug, Args)]
pub struct LowerBoundArgs {
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// Target accuracies start:stop:step or a list.
    #[arg(long, default_value = "0.5:1.0:0.01")]
    pub targets: String,
    /// Patience range lo:hi.
    #[arg(long, default_value = "1:11")]
    pub t: String,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn patience_values(flag: &str, value: &str) -> Result<Vec<usize>> {
    let (lo, hi) = parse_range(flag, value)?;
    Ok((lo..=hi).collect())
}

/// Text report of every form of the condition at one `(n, t, p, q)`.
pub fn bound_report(n: usize, t: usize, p: f64, q: f64) -> Result<String> {
    let bp = BoundParams::new(n, t, p, q)?;
    let mut out = String::new();
    let _ = writeln!(out, "n={n} t={t} p={p} q={q}");
    let forms: [(&str, &str, Inequality); 4] = [
        ("theorem", "n-t < (1/(2q))^t * p/q - p", theorem_form(&bp)),
        ("proof", "n-t < (1/(2q))^t * p/q - q", proof_form(&bp)),
        ("opening", "n-t < (1/(2q))^(t+1) * p - q", opening_form(&bp)),
        (
            "intermediate",
            "(n-t) q^(t+1) - (n-t-1) q^(t+2) < (1/2)^t * p",
            intermediate_bound(&bp),
        ),
    ];
    for (name, formula, ineq) in &forms {
        let _ = writeln!(
            out,
            "  {name:<12} {formula:<46} lhs={} rhs={} holds={}",
            ineq.lhs,
            ineq.rhs,
            ineq.holds()
        );
    }
    let _ = writeln!(
        out,
        "  stop floor   q^(t+1) + (1-q)^(t+1) = {}",
        stop_probability_floor(q, t)
    );
    if p == q {
        let _ = writeln!(
            out,
            "  note: p == q, so the theorem and proof forms coincide"
        );
    }
    let verdicts: Vec<bool> = forms[..3].iter().map(|f| f.2.holds()).collect();
    if verdicts.iter().any(|&v| v != verdicts[0]) {
        let _ = writeln!(out, "  note: the three forms disagree at this point");
    }
    Ok(out)
}

fn emit(out: &Option<PathBuf>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            csv::write(path, text)
        }
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn summarize(report: &ExperimentReport, stdout: &mut dyn Write) -> Result<()> {
    let mut text = String::new();
    for seed in &report.seeds {
        for (policy, eval) in &seed.evals {
            let _ = writeln!(
                text,
                "seed {} {}: metric={} speedup={}",
                seed.seed,
                policy.descriptor(),
                eval.metric.value(),
                eval.speedup
            );
        }
    }
    for row in &report.sweep_median {
        let _ = writeln!(
            text,
            "median t={}: metric={} speedup={}",
            row.t, row.metric, row.speedup
        );
    }
    let _ = writeln!(
        text,
        "wrote {} files to {}",
        report.manifest.len() + 1,
        report.out_dir.display()
    );
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn experiment(
    args: &ExperimentArgs,
    stages: Stages,
    stdout: &mut dyn Write,
    stderr: &mut (dyn Write + Send),
) -> Result<ExperimentReport> {
    let cfg = args.resolve()?;
    let log = std::sync::Mutex::new(stderr);
    let report = run_experiment(&cfg, stages, &|line| {
        if let Ok(mut w) = log.lock() {
            let _ = writeln!(w, "{line}");
        }
    })?;
    summarize(&report, stdout)?;
    Ok(report)
}

fn dispatch(cli: Cli, stdout: &mut dyn Write, stderr: &mut (dyn Write + Send)) -> Result<()> {
    match cli.command {
        Command::Train(args) => experiment(&args, Stages::TRAIN_ONLY, stdout, stderr).map(drop),
        Command::Eval(args) => {
            if let Some(r) = args.latency_repeats {
                if r < 3 {
                    return Err(Error::bad_value("--latency-repeats", "must be >= 3"));
                }
            }
            let stages = Stages {
                evaluate: true,
                sweep: false,
                compare: false,
            };
            let report = experiment(&args.experiment, stages, stdout, stderr)?;
            if let Some(repeats) = args.latency_repeats {
                let cfg = args.experiment.resolve()?;
                let (_, eval) = gen_synthetic(&cfg.dataset.spec())?;
                for seed in &report.seeds {
                    for policy in &cfg.policies {
                        let latency = wallclock_probe(&seed.params, policy, &eval, repeats)?;
                        let _ = writeln!(
                            stdout,
                            "seed {} {}: median latency {} us/instance",
                            seed.seed,
                            policy.descriptor(),
                            latency.as_secs_f64() * 1e6
                        );
                    }
                }
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let stages = Stages {
                evaluate: false,
                sweep: true,
                compare: false,
            };
            experiment(&args, stages, stdout, stderr).map(drop)
        }
        Command::Compare(args) => {
            let stages = Stages {
                evaluate: false,
                sweep: false,
                compare: true,
            };
            experiment(&args, stages, stdout, stderr).map(drop)
        }
        Command::Simulate(args) => {
            let patience = patience_values("--t", &args.t)?;
            let errors = match (&args.acc_grid, args.q, args.p) {
                (Some(grid), _, _) => parse_grid("--acc-grid", grid)?
                    .into_iter()
                    .map(equal_errors)
                    .collect(),
                (None, Some(q), Some(p)) => vec![(q, p)],
                _ => vec![(0.2, 0.2)],
            };
            let pool = worker_pool(args.workers)?;
            let rows =
                pool.install(|| simulate_grid(args.n, &errors, &patience, args.trials, args.seed))?;
            emit(&args.out, &simulation_table(&rows).render(), stdout)
        }
        Command::Bound(args) => {
            let mut text = String::new();
            for t in patience_values("--t", &args.t)? {
                text.push_str(&bound_report(args.n, t, args.p, args.q)?);
            }
            emit(&None, &text, stdout)
        }
        Command::Lowerbound(args) => {
            let targets = parse_grid("--targets", &args.targets)?;
            let patience = patience_values("--t", &args.t)?;
            let pool = worker_pool(args.workers)?;
            let rows = pool.install(|| {
                lower_bound_surface(args.n, &targets, &patience, args.trials, args.seed)
            })?;
            emit(&args.out, &lower_bound_table(&rows).render(), stdout)
        }
        Command::Keys => {
            let mut text = String::new();
            for (key, help) in KEYS {
                let _ = writeln!(text, "{key:<26} {help}");
            }
            emit(&None, &text, stdout)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = stderr.write_all(rendered.as_bytes());
                exit_code::VALIDATION
            } else {
                let _ = stdout.write_all(rendered.as_bytes());
                exit_code::SUCCESS
            };
        }
    };
    match dispatch(cli, stdout, stderr) {
        Ok(()) => exit_code::SUCCESS,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
