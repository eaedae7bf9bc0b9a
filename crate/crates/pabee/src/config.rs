//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are dotted paths; policies are indexed (`policy[0].kind = patience`).
//! Unknown keys are errors. See [`KEYS`] for the full table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use pabee_core::data::{DatasetKind, DatasetSpec};
use pabee_core::model::{Nonlinearity, OptimizerConfig, StackConfig};
use pabee_core::policy::{PolicyConfig, DEFAULT_TAU};
use pabee_core::theory::accuracy_grid;

use crate::error::{Error, Result};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    (
        "dataset.kind",
        "gaussian_blobs | two_spirals | regression_wave",
    ),
    ("dataset.num_classes", "classes for gaussian_blobs (>= 2)"),
    (
        "dataset.separation",
        "distance between opposite blob centres (> 0)",
    ),
    ("dataset.noise", "Gaussian noise standard deviation (>= 0)"),
    ("dataset.num_train", "training examples (>= 1)"),
    ("dataset.num_eval", "evaluation examples (>= 1)"),
    (
        "dataset.input_dim",
        "input features (>= 1; >= 2 for two_spirals)",
    ),
    ("dataset.seed", "dataset generation seed"),
    ("model.hidden_dim", "width of every hidden layer"),
    ("model.num_layers", "stacked layers n, one head each (>= 2)"),
    ("model.nonlinearity", "tanh | relu"),
    (
        "model.seed",
        "initialisation/shuffling seed when run.seeds is unset",
    ),
    ("optimizer.learning_rate", "SGD step size (>= 0)"),
    ("optimizer.momentum", "momentum coefficient in [0, 1)"),
    ("optimizer.batch_size", "mini-batch size (>= 1)"),
    ("optimizer.epochs", "passes over the training set (>= 1)"),
    (
        "policy[i].kind",
        "patience | entropy | maxprob | fixed_depth | never",
    ),
    ("policy[i].t", "patience (patience kind, >= 1)"),
    (
        "policy[i].tau",
        "regression agreement threshold (patience kind, > 0)",
    ),
    (
        "policy[i].threshold",
        "entropy (nats) or max-probability threshold",
    ),
    ("policy[i].depth", "exit layer (fixed_depth kind)"),
    (
        "sweep.patience",
        "inclusive patience range `lo:hi` within [1, n-1] (default 1:n-1)",
    ),
    (
        "sweep.entropy",
        "entropy thresholds: `a,b,c` or `start:stop:step`",
    ),
    (
        "sweep.maxprob",
        "max-probability thresholds: `a,b,c` or `start:stop:step`",
    ),
    ("run.output_dir", "directory receiving every output file"),
    (
        "run.seeds",
        "comma-separated model seeds; one model per seed",
    ),
    ("run.workers", "worker threads (default: number of cores)"),
    ("run.checkpoint", "load this checkpoint instead of training"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFamily {
    GaussianBlobs,
    TwoSpirals,
    RegressionWave,
}

impl DatasetFamily {
    fn name(self) -> &'static str {
        match self {
            DatasetFamily::GaussianBlobs => "gaussian_blobs",
            DatasetFamily::TwoSpirals => "two_spirals",
            DatasetFamily::RegressionWave => "regression_wave",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSettings {
    pub family: DatasetFamily,
    pub num_classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub num_train: usize,
    pub num_eval: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl DatasetSettings {
    pub fn spec(&self) -> DatasetSpec {
        let kind = match self.family {
            DatasetFamily::GaussianBlobs => DatasetKind::GaussianBlobs {
                num_classes: self.num_classes,
                separation: self.separation,
                noise: self.noise,
            },
            DatasetFamily::TwoSpirals => DatasetKind::TwoSpirals { noise: self.noise },
            DatasetFamily::RegressionWave => DatasetKind::RegressionWave { noise: self.noise },
        };
        DatasetSpec {
            kind,
            num_train: self.num_train,
            num_eval: self.num_eval,
            input_dim: self.input_dim,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    /// `None` sweeps every patience from 1 to n − 1.
    pub patience: Option<(usize, usize)>,
    pub entropy: Vec<f64>,
    pub maxprob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSettings {
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub workers: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSettings,
    pub model: ModelSettings,
    pub optimizer: OptimizerConfig,
    pub policies: Vec<PolicyConfig>,
    pub sweep: SweepSettings,
    pub run: RunSettings,
}

fn default_entropy_grid() -> Vec<f64> {
    accuracy_grid(0.05, 0.65, 0.05).expect("static grid")
}

fn default_maxprob_grid() -> Vec<f64> {
    accuracy_grid(0.55, 0.99, 0.01).expect("static grid")
}

impl Default for ExperimentConfig {
    /// Three noisy Gaussian blobs, a 12-layer tanh stack, patience sweep 1–11.
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSettings {
                family: DatasetFamily::GaussianBlobs,
                num_classes: 3,
                separation: 4.0,
                noise: 1.0,
                num_train: 1000,
                num_eval: 1000,
                input_dim: 2,
                seed: 0,
            },
            model: ModelSettings {
                hidden_dim: 32,
                num_layers: 12,
                nonlinearity: Nonlinearity::Tanh,
                seed: 1,
            },
            optimizer: OptimizerConfig {
                epochs: 30,
                ..OptimizerConfig::default()
            },
            policies: vec![PolicyConfig::patience(6), PolicyConfig::Never],
            sweep: SweepSettings {
                patience: None,
                entropy: default_entropy_grid(),
                maxprob: default_maxprob_grid(),
            },
            run: RunSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Two noisy spirals on a 12-layer, 32-wide stack: early heads underfit,
    /// so heads of different depth disagree. The smaller step keeps every
    /// seed out of the near-linear plateau that 0.05 falls into.
    pub fn diversity_benchmark() -> Self {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            dataset: DatasetSettings {
                family: DatasetFamily::TwoSpirals,
                num_classes: 2,
                separation: 1.0,
                noise: 0.15,
                num_train: 2000,
                num_eval: 2000,
                input_dim: 2,
                seed: 0,
            },
            optimizer: OptimizerConfig {
                epochs: 150,
                learning_rate: 0.02,
                ..base.optimizer
            },
            run: RunSettings {
                seeds: vec![1, 2, 3, 4, 5],
                ..base.run.clone()
            },
            ..base
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut assignments = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            assignments.push((key.trim().to_string(), value.trim().to_string()));
        }
        self.apply(&assignments)
    }

    /// Applies assignments in order. Policy keys replace the whole policy
    /// list when any are present.
    pub fn apply(&mut self, assignments: &[(String, String)]) -> Result<()> {
        let mut policies: BTreeMap<usize, BTreeMap<String, (String, String)>> = BTreeMap::new();
        for (key, value) in assignments {
            if let Some((index, field)) = policy_key(key)? {
                policies
                    .entry(index)
                    .or_default()
                    .insert(field.to_string(), (key.clone(), value.clone()));
            } else {
                self.set(key, value)?;
            }
        }
        if !policies.is_empty() {
            self.policies = build_policies(&policies)?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dataset;
        match key {
            "dataset.kind" => {
                d.family = match value {
                    "gaussian_blobs" => DatasetFamily::GaussianBlobs,
                    "two_spirals" => DatasetFamily::TwoSpirals,
                    "regression_wave" => DatasetFamily::RegressionWave,
                    _ => return Err(Error::bad_value(key, format!("unknown dataset `{value}`"))),
                }
            }
            "dataset.num_classes" => d.num_classes = parse(key, value)?,
            "dataset.separation" => d.separation = parse(key, value)?,
            "dataset.noise" => d.noise = parse(key, value)?,
            "dataset.num_train" => d.num_train = parse(key, value)?,
            "dataset.num_eval" => d.num_eval = parse(key, value)?,
            "dataset.input_dim" => d.input_dim = parse(key, value)?,
            "dataset.seed" => d.seed = parse(key, value)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, value)?,
            "model.num_layers" => self.model.num_layers = parse(key, value)?,
            "model.nonlinearity" => {
                self.model.nonlinearity = match value {
                    "tanh" => Nonlinearity::Tanh,
                    "relu" => Nonlinearity::Relu,
                    _ => {
                        return Err(Error::bad_value(
                            key,
                            format!("unknown nonlinearity `{value}`"),
                        ))
                    }
                }
            }
            "model.seed" => self.model.seed = parse(key, value)?,
            "optimizer.learning_rate" => self.optimizer.learning_rate = parse(key, value)?,
            "optimizer.momentum" => self.optimizer.momentum = parse(key, value)?,
            "optimizer.batch_size" => self.optimizer.batch_size = parse(key, value)?,
            "optimizer.epochs" => self.optimizer.epochs = parse(key, value)?,
            "sweep.patience" => self.sweep.patience = Some(parse_range(key, value)?),
            "sweep.entropy" => self.sweep.entropy = parse_grid(key, value)?,
            "sweep.maxprob" => self.sweep.maxprob = parse_grid(key, value)?,
            "run.output_dir" => self.run.output_dir = Some(PathBuf::from(value)),
            "run.seeds" => self.run.seeds = parse_list(key, value)?,
            "run.workers" => {
                let w: usize = parse(key, value)?;
                if w == 0 {
                    return Err(Error::bad_value(key, "must be >= 1"));
                }
                self.run.workers = Some(w);
            }
            "run.checkpoint" => self.run.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Seeds to train with; `model.seed` when `run.seeds` is empty.
    pub fn seeds(&self) -> Vec<u64> {
        if self.run.seeds.is_empty() {
            vec![self.model.seed]
        } else {
            self.run.seeds.clone()
        }
    }

    /// The patience sweep for a model with `num_layers` layers.
    pub fn patience_range(&self, num_layers: usize) -> (usize, usize) {
        self.sweep
            .patience
            .unwrap_or((1, num_layers.saturating_sub(1)))
    }

    pub fn stack_config(&self, seed: u64) -> StackConfig {
        let spec = self.dataset.spec();
        StackConfig {
            input_dim: self.dataset.input_dim,
            hidden_dim: self.model.hidden_dim,
            num_layers: self.model.num_layers,
            task: spec.kind.task(),
            nonlinearity: self.model.nonlinearity,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Invalid("at least one policy is required".into()));
        }
        self.dataset.spec().validate()?;
        self.stack_config(self.model.seed).validate()?;
        self.optimizer.validate()?;
        for p in &self.policies {
            p.validate()?;
        }
        let task = self.dataset.spec().kind.task();
        if !task.is_classification()
            && self.policies.iter().any(|p| {
                matches!(
                    p,
                    PolicyConfig::Entropy { .. } | PolicyConfig::MaxProb { .. }
                )
            })
        {
            return Err(Error::Invalid(
                "entropy and maxprob policies need a classification dataset".into(),
            ));
        }
        let n = self.model.num_layers;
        let (lo, hi) = self.patience_range(n);
        if lo == 0 || lo > hi || hi >= n {
            return Err(Error::bad_value(
                "sweep.patience",
                format!("range {lo}:{hi} must lie within [1, {}]", n - 1),
            ));
        }
        if self.sweep.entropy.is_empty() || self.sweep.maxprob.is_empty() {
            return Err(Error::Invalid("threshold grids must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces this configuration.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("dataset.kind", d.family.name().into());
        line("dataset.num_classes", d.num_classes.to_string());
        line("dataset.separation", d.separation.to_string());
        line("dataset.noise", d.noise.to_string());
        line("dataset.num_train", d.num_train.to_string());
        line("dataset.num_eval", d.num_eval.to_string());
        line("dataset.input_dim", d.input_dim.to_string());
        line("dataset.seed", d.seed.to_string());
        line("model.hidden_dim", self.model.hidden_dim.to_string());
        line("model.num_layers", self.model.num_layers.to_string());
        line("model.nonlinearity", self.model.nonlinearity.name().into());
        line("model.seed", self.model.seed.to_string());
        line(
            "optimizer.learning_rate",
            self.optimizer.learning_rate.to_string(),
        );
        line("optimizer.momentum", self.optimizer.momentum.to_string());
        line(
            "optimizer.batch_size",
            self.optimizer.batch_size.to_string(),
        );
        line("optimizer.epochs", self.optimizer.epochs.to_string());
        for (i, p) in self.policies.iter().enumerate() {
            line(&format!("policy[{i}].kind"), p.kind().into());
            match *p {
                PolicyConfig::Patience { t, tau } => {
                    line(&format!("policy[{i}].t"), t.to_string());
                    line(&format!("policy[{i}].tau"), tau.to_string());
                }
                PolicyConfig::Entropy { threshold } | PolicyConfig::MaxProb { threshold } => {
                    line(&format!("policy[{i}].threshold"), threshold.to_string());
                }
                PolicyConfig::FixedDepth { depth } => {
                    line(&format!("policy[{i}].depth"), depth.to_string());
                }
                PolicyConfig::Never => {}
            }
        }
        if let Some((lo, hi)) = self.sweep.patience {
            line("sweep.patience", format!("{lo}:{hi}"));
        }
        line("sweep.entropy", join(&self.sweep.entropy));
        line("sweep.maxprob", join(&self.sweep.maxprob));
        if let Some(dir) = &self.run.output_dir {
            line("run.output_dir", dir.display().to_string());
        }
        if !self.run.seeds.is_empty() {
            line("run.seeds", join(&self.run.seeds));
        }
        if let Some(w) = self.run.workers {
            line("run.workers", w.to_string());
        }
        if let Some(c) = &self.run.checkpoint {
            line("run.checkpoint", c.display().to_string());
        }
        out
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Splits `policy[3].kind` into `(3, "kind")`.
fn policy_key(key: &str) -> Result<Option<(usize, &str)>> {
    let Some(rest) = key.strip_prefix("policy[") else {
        return Ok(None);
    };
    let (index, field) = rest
        .split_once("].")
        .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    let index = index
        .parse()
        .map_err(|_| Error::bad_value(key, "policy index must be a non-negative integer"))?;
    match field {
        "kind" | "t" | "tau" | "threshold" | "depth" => Ok(Some((index, field))),
        _ => Err(Error::UnknownKey(key.to_string())),
    }
}

fn build_policies(
    entries: &BTreeMap<usize, BTreeMap<String, (String, String)>>,
) -> Result<Vec<PolicyConfig>> {
    let mut out = Vec::with_capacity(entries.len());
    for (expected, (&index, fields)) in entries.iter().enumerate() {
        if index != expected {
            return Err(Error::Invalid(format!(
                "policy indices must be contiguous from 0; policy[{expected}] is missing"
            )));
        }
        let (kind_key, kind) = fields
            .get("kind")
            .ok_or_else(|| Error::bad_value(&format!("policy[{index}].kind"), "missing"))?;
        let allowed: &[&str] = match kind.as_str() {
            "patience" => &["kind", "t", "tau"],
            "entropy" | "maxprob" => &["kind", "threshold"],
            "fixed_depth" => &["kind", "depth"],
            "never" => &["kind"],
            _ => {
                return Err(Error::bad_value(
                    kind_key,
                    format!("unknown policy kind `{kind}`"),
                ))
            }
        };
        if let Some((_, (key, _))) = fields.iter().find(|(f, _)| !allowed.contains(&f.as_str())) {
            return Err(Error::bad_value(
                key,
                format!("not used by the {kind} policy"),
            ));
        }
        let required = |field: &str| {
            fields.get(field).ok_or_else(|| {
                Error::bad_value(
                    &format!("policy[{index}].{field}"),
                    format!("required by the {kind} policy"),
                )
            })
        };
        let policy = match kind.as_str() {
            "patience" => {
                let (k, v) = required("t")?;
                let tau = match fields.get("tau") {
                    Some((k, v)) => parse(k, v)?,
                    None => DEFAULT_TAU,
                };
                PolicyConfig::Patience {
                    t: parse(k, v)?,
                    tau,
                }
            }
            "entropy" => {
                let (k, v) = required("threshold")?;
                PolicyConfig::Entropy {
                    threshold: parse(k, v)?,
                }
            }
            "maxprob" => {
                let (k, v) = required("threshold")?;
                PolicyConfig::MaxProb {
                    threshold: parse(k, v)?,
                }
            }
            "fixed_depth" => {
                let (k, v) = required("depth")?;
                PolicyConfig::FixedDepth {
                    depth: parse(k, v)?,
                }
            }
            _ => PolicyConfig::Never,
        };
        out.push(policy);
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::bad_value(key, format!("cannot parse `{value}`")))
}

pub fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `lo:hi` inclusive, or a single value.
pub fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once(':') {
        Some((lo, hi)) => {
            let (lo, hi): (usize, usize) = (parse(key, lo.trim())?, parse(key, hi.trim())?);
            if lo > hi {
                return Err(Error::bad_value(key, format!("empty range {value}")));
            }
            Ok((lo, hi))
        }
        None => {
            let v = parse(key, value)?;
            Ok((v, v))
        }
    }
}

/// `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(key: &str, value: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = value.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (
                parse(key, start.trim())?,
                parse(key, stop.trim())?,
                parse(key, step.trim())?,
            );
            accuracy_grid(start, stop, step).map_err(|e| Error::bad_value(key, e.to_string()))
        }
        [_] => parse_list(key, value),
        _ => Err(Error::bad_value(
            key,
            format!("expected a list or start:stop:step, got `{value}`"),
        )),
    }
}
