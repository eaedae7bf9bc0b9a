//! Per-instance adaptive inference and dataset-level speed/quality reports.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, ModelParams, PredictionOutput, Target, Targets};
use crate::policy::{PolicyConfig, Prediction};

/// What happened to one input.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    /// 1-based layer whose head produced the prediction.
    pub exit_layer: usize,
    pub prediction: Prediction,
    /// Head outputs of the layers actually computed (`exit_layer` entries).
    pub per_layer_outputs: Vec<PredictionOutput>,
    /// The policy fired (possibly exactly at the last layer).
    pub exited_early: bool,
}

/// Runs layers in order with batch size one, stopping at the first layer
/// where `policy` fires. Without an exit, the last head predicts.
pub fn run_instance(
    params: &ModelParams,
    policy: &PolicyConfig,
    x: &[f64],
) -> Result<InferenceTrace> {
    policy.validate()?;
    let n = params.num_layers();
    let mut monitor = policy.start();
    let mut h = params.embed(x)?;
    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        h = params.advance(i, &h)?;
        let out = params.head_output(i, &h)?;
        let fired = monitor.observe(&out)?;
        outputs.push(out);
        if fired || i + 1 == n {
            return Ok(InferenceTrace {
                exit_layer: i + 1,
                prediction: Prediction::of(&outputs[i]),
                per_layer_outputs: outputs,
                exited_early: fired,
            });
        }
    }
    unreachable!("a validated model has at least two layers")
}

/// Prediction quality over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Accuracy(f64),
    Mse(f64),
}

impl Metric {
    pub fn value(&self) -> f64 {
        match *self {
            Metric::Accuracy(v) | Metric::Mse(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    /// `n · instances / Σ exit_layer`.
    pub speedup: f64,
    /// Number of instances that exited at each layer `1..=n` (index `layer − 1`).
    pub exit_histogram: Vec<usize>,
    pub num_instances: usize,
}

impl EvalReport {
    /// Reduces traces (in dataset order) into a report.
    pub fn from_traces(
        num_layers: usize,
        traces: &[InferenceTrace],
        targets: &Targets,
    ) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::Argument("cannot evaluate an empty dataset".into()));
        }
        if traces.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} traces for {} targets",
                traces.len(),
                targets.len()
            )));
        }
        let mut histogram = vec![0usize; num_layers];
        let mut correct = 0usize;
        let mut squared_error = 0.0;
        for (i, trace) in traces.iter().enumerate() {
            histogram[trace.exit_layer - 1] += 1;
            match (trace.prediction, targets.get(i)) {
                (Prediction::Class(c), Target::Class(z)) => correct += usize::from(c == z),
                (Prediction::Value(v), Target::Value(y)) => squared_error += (v - y) * (v - y),
                _ => {
                    return Err(Error::Argument(
                        "prediction kind does not match targets".into(),
                    ))
                }
            }
        }
        let count = traces.len();
        let metric = match targets {
            Targets::Classes(_) => Metric::Accuracy(correct as f64 / count as f64),
            Targets::Values(_) => Metric::Mse(squared_error / count as f64),
        };
        let speedup = speedup_from_histogram(&histogram);
        Ok(EvalReport {
            metric,
            speedup,
            exit_histogram: histogram,
            num_instances: count,
        })
    }

    /// Mean 1-based exit layer.
    pub fn average_exit_layer(&self) -> f64 {
        layers_executed(&self.exit_histogram) as f64 / self.num_instances as f64
    }

    /// `descriptor,metric,speedup,h1:h2:…:hn`
    pub fn to_row(&self, descriptor: &str) -> String {
        format!(
            "{descriptor},{},{},{}",
            self.metric.value(),
            self.speedup,
            histogram_field(&self.exit_histogram)
        )
    }
}

/// Colon-separated histogram counts.
pub fn histogram_field(histogram: &[usize]) -> String {
    let mut out = String::new();
    for (i, c) in histogram.iter().enumerate() {
        if i > 0 {
            out.push(':');
        }
        out.push_str(&format!("{c}"));
    }
    out
}

/// `Σ count[ℓ] · ℓ` over 1-based layers.
pub fn layers_executed(histogram: &[usize]) -> usize {
    histogram.iter().enumerate().map(|(i, c)| (i + 1) * c).sum()
}

pub fn speedup_from_histogram(histogram: &[usize]) -> f64 {
    let instances: usize = histogram.iter().sum();
    (histogram.len() * instances) as f64 / layers_executed(histogram) as f64
}

/// Runs every example through [`run_instance`] and summarises.
pub fn evaluate(
    params: &ModelParams,
    policy: &PolicyConfig,
    data: &LabeledDataset,
) -> Result<EvalReport> {
    data.check_task(params.config.task, params.config.input_dim)?;
    let traces = (0..data.len())
        .map(|i| run_instance(params, policy, data.input(i)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_traces(params.num_layers(), &traces, data.targets())
}
