//! Stacked multi-exit network: an affine embedding, `n` affine+nonlinearity
//! layers, and one affine prediction head after every layer.
//!
//! Training minimises the depth-weighted average of the per-head losses,
//! `Σ j·L_j / Σ j`, so deeper heads (which cost more to reach) weigh more.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, log_sum_exp, softmax, Matrix, ProbVector};

/// RNG stream used for parameter initialisation.
const INIT_STREAM: u64 = 0;
/// RNG stream used for mini-batch shuffling.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification {
        num_classes: usize,
    },
    /// Single-output regression.
    Regression,
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Classification { num_classes } => num_classes,
            Task::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => libm::tanh(x),
            Nonlinearity::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Relu => "relu",
        }
    }
}

/// Architecture and seed of a multi-exit stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub task: Task,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Argument(
                "input_dim and hidden_dim must be >= 1".into(),
            ));
        }
        if self.num_layers < 2 {
            return Err(Error::Argument(format!(
                "num_layers must be >= 2 so an early exit exists, got {}",
                self.num_layers
            )));
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::Argument(format!(
                    "classification needs >= 2 classes, got {num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        let (d, h, o, n) = (
            self.input_dim,
            self.hidden_dim,
            self.task.output_dim(),
            self.num_layers,
        );
        (d * h + h) + n * (h * h + h) + n * (h * o + o)
    }
}

/// `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Affine {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = libm::sqrt(6.0 / (inputs + outputs) as f64);
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite, ordered bounds");
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Affine {
            weight: Matrix::from_vec(outputs, inputs, data).expect("sized above"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(y)
    }

    fn len(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    /// Accumulates `scale · (δ xᵀ, δ)` into this tensor pair.
    fn add_outer(&mut self, delta: &[f64], x: &[f64], scale: f64) {
        let cols = self.weight.cols();
        let w = self.weight.data_mut();
        for (r, &d) in delta.iter().enumerate() {
            let s = scale * d;
            if s == 0.0 {
                continue;
            }
            for (wv, &xv) in w[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *wv += s * xv;
            }
        }
        for (b, &d) in self.bias.iter_mut().zip(delta) {
            *b += scale * d;
        }
    }
}

/// Weights of the embedding, the `n` stacked layers and the `n` heads.
///
/// The flat parameter order (used by [`ModelParams::to_flat`] and by
/// checkpoints) is: embedding weight (row-major), embedding bias, then for
/// each layer `1..=n` its weight and bias, then for each head `1..=n` its
/// weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: StackConfig,
    pub embedding: Affine,
    pub layers: Vec<Affine>,
    pub heads: Vec<Affine>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    /// Seeded Glorot-uniform initialisation with zero biases.
    pub fn init(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let (h, o) = (config.hidden_dim, config.task.output_dim());
        let embedding = Affine::glorot(config.input_dim, h, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| Affine::glorot(h, h, &mut rng))
            .collect();
        let heads = (0..config.num_layers)
            .map(|_| Affine::glorot(h, o, &mut rng))
            .collect();
        Ok(ModelParams {
            config,
            embedding,
            layers,
            heads,
        })
    }

    pub fn zeros(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let (h, o) = (config.hidden_dim, config.task.output_dim());
        Ok(ModelParams {
            config,
            embedding: Affine::zeros(config.input_dim, h),
            layers: (0..config.num_layers)
                .map(|_| Affine::zeros(h, h))
                .collect(),
            heads: (0..config.num_layers)
                .map(|_| Affine::zeros(h, o))
                .collect(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tensors in flat-parameter order.
    pub fn tensors(&self) -> impl Iterator<Item = &Affine> {
        core::iter::once(&self.embedding)
            .chain(self.layers.iter())
            .chain(self.heads.iter())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        core::iter::once(&mut self.embedding)
            .chain(self.layers.iter_mut())
            .chain(self.heads.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Affine::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            flat.extend_from_slice(t.weight.data());
            flat.extend_from_slice(&t.bias);
        }
        flat
    }

    pub fn from_flat(config: StackConfig, flat: &[f64]) -> Result<Self> {
        let mut params = ModelParams::zeros(config)?;
        params.set_flat(flat)?;
        Ok(params)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        ensure_finite(flat, "parameter")?;
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (w, tail) = rest.split_at(t.weight.data().len());
            t.weight.data_mut().copy_from_slice(w);
            let (b, tail) = tail.split_at(t.bias.len());
            t.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// `self += scale · other`; both must share a layout.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().zip(other.tensors()) {
            for (d, s) in dst.weight.data_mut().iter_mut().zip(src.weight.data()) {
                *d += scale * s;
            }
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d += scale * s;
            }
        }
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.weight.data_mut().fill(0.0);
            t.bias.fill(0.0);
        }
    }

    /// `h_0 = Embedding(x)`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        ensure_finite(x, "input feature")?;
        self.embedding.apply(x)
    }

    /// `h_i = f(W_i h_{i−1} + b_i)` for the 0-based layer `index`.
    pub fn advance(&self, index: usize, h: &[f64]) -> Result<Vec<f64>> {
        let act = self.config.nonlinearity;
        let mut next = self.layers[index].apply(h)?;
        for v in &mut next {
            *v = act.apply(*v);
        }
        Ok(next)
    }

    /// Raw head output (logits or the regression value) at 0-based `index`.
    pub fn head_raw(&self, index: usize, h: &[f64]) -> Result<Vec<f64>> {
        self.heads[index].apply(h)
    }

    pub fn head_output(&self, index: usize, h: &[f64]) -> Result<PredictionOutput> {
        let raw = self.head_raw(index, h)?;
        match self.config.task {
            Task::Classification { .. } => Ok(PredictionOutput::Distribution(softmax(&raw)?)),
            Task::Regression => {
                ensure_finite(&raw, "regression output")?;
                Ok(PredictionOutput::Value(raw[0]))
            }
        }
    }
}

/// One head's output: a class distribution or a scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionOutput {
    Distribution(ProbVector),
    Value(f64),
}

impl PredictionOutput {
    pub fn distribution(&self) -> Option<&ProbVector> {
        match self {
            PredictionOutput::Distribution(p) => Some(p),
            PredictionOutput::Value(_) => None,
        }
    }
}

/// Every intermediate of a full-depth pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `h_0`.
    pub embedded: Vec<f64>,
    /// `h_1 … h_n`.
    pub hidden: Vec<Vec<f64>>,
    /// Head outputs for layers `1 … n`.
    pub outputs: Vec<PredictionOutput>,
}

pub fn forward_all(params: &ModelParams, x: &[f64]) -> Result<ForwardPass> {
    let embedded = params.embed(x)?;
    let n = params.num_layers();
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        let h = params.advance(i, hidden.last().unwrap_or(&embedded))?;
        outputs.push(params.head_output(i, &h)?);
        hidden.push(h);
    }
    Ok(ForwardPass {
        embedded,
        hidden,
        outputs,
    })
}

/// Ground truth for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// Cross-entropy `−ln p[z]`.
///
/// A probability that underflowed to exactly zero is clamped to the smallest
/// positive normal `f64`, capping the loss near 708.4. Training itself works
/// from logits via [`cross_entropy_from_logits`] and never hits the clamp.
pub fn loss_classification(y_pred: &ProbVector, z: usize) -> Result<f64> {
    let p = *y_pred.values().get(z).ok_or_else(|| {
        Error::Argument(format!(
            "class {z} out of range for {} classes",
            y_pred.len()
        ))
    })?;
    Ok(-libm::log(p.max(f64::MIN_POSITIVE)))
}

/// `ln Σ exp(logits) − logits[z]`.
pub fn cross_entropy_from_logits(logits: &[f64], z: usize) -> Result<f64> {
    if z >= logits.len() {
        return Err(Error::Argument(format!(
            "class {z} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[z])
}

/// Squared error.
pub fn loss_regression(y_pred: f64, y_true: f64) -> f64 {
    let d = y_pred - y_true;
    d * d
}

/// Per-head weights `j / Σ j` for `j = 1..=n`.
pub fn layer_weights(n: usize) -> Vec<f64> {
    let total = (n * (n + 1) / 2) as f64;
    (1..=n).map(|j| j as f64 / total).collect()
}

/// Depth-weighted average `Σ j·L_j / Σ j`.
pub fn total_loss(per_layer: &[f64]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(Error::Argument("total_loss of zero layers".into()));
    }
    ensure_finite(per_layer, "layer loss")?;
    // Offsets from the first loss, so identical losses come back exactly.
    let base = per_layer[0];
    let numerator: f64 = per_layer
        .iter()
        .enumerate()
        .map(|(j, l)| (j + 1) as f64 * (l - base))
        .sum();
    let n = per_layer.len();
    Ok(base + numerator / (n * (n + 1) / 2) as f64)
}

/// Loss of one example and its gradient for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprop {
    pub loss: f64,
    pub gradient: Gradients,
}

/// Gradient of the depth-weighted total loss.
pub fn backward(params: &ModelParams, x: &[f64], target: Target) -> Result<Backprop> {
    backward_weighted(params, x, target, &layer_weights(params.num_layers()))
}

/// Gradient of `Σ weights[j] · L_j` for arbitrary per-head weights.
pub fn backward_weighted(
    params: &ModelParams,
    x: &[f64],
    target: Target,
    weights: &[f64],
) -> Result<Backprop> {
    let mut gradient = ModelParams::zeros(params.config)?;
    let loss = accumulate_gradient(params, x, target, weights, &mut gradient, 1.0)?;
    Ok(Backprop { loss, gradient })
}

/// Adds `scale · ∇(Σ weights[j]·L_j)` into `grad` and returns the weighted
/// loss of this example.
fn accumulate_gradient(
    params: &ModelParams,
    x: &[f64],
    target: Target,
    weights: &[f64],
    grad: &mut Gradients,
    scale: f64,
) -> Result<f64> {
    let n = params.num_layers();
    if weights.len() != n {
        return Err(Error::Shape(format!(
            "{} head weights for {n} layers",
            weights.len()
        )));
    }
    let embedded = params.embed(x)?;
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let h = params.advance(i, hidden.last().unwrap_or(&embedded))?;
        ensure_finite(&h, "hidden unit").map_err(|_| non_finite(i + 1, "hidden state"))?;
        hidden.push(h);
    }

    let act = params.config.nonlinearity;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; params.config.hidden_dim];
    for i in (0..n).rev() {
        let head = &params.heads[i];
        let raw = head.apply(&hidden[i])?;
        let mut delta = match (params.config.task, target) {
            (Task::Classification { .. }, Target::Class(z)) => {
                loss += weights[i] * cross_entropy_from_logits(&raw, z)?;
                let mut p = softmax(&raw)
                    .map_err(|_| non_finite(i + 1, "logit"))?
                    .values()
                    .to_vec();
                p[z] -= 1.0;
                p
            }
            (Task::Regression, Target::Value(y)) => {
                loss += weights[i] * loss_regression(raw[0], y);
                vec![2.0 * (raw[0] - y)]
            }
            _ => {
                return Err(Error::Argument(
                    "target kind does not match the task".into(),
                ))
            }
        };
        for d in &mut delta {
            *d *= weights[i];
        }
        grad.heads[i].add_outer(&delta, &hidden[i], scale);
        for (u, g) in upstream
            .iter_mut()
            .zip(head.weight.transpose_matvec(&delta)?)
        {
            *u += g;
        }

        let below = if i == 0 { &embedded } else { &hidden[i - 1] };
        let pre_grad: Vec<f64> = upstream
            .iter()
            .zip(&hidden[i])
            .map(|(g, &h)| g * act.derivative_from_output(h))
            .collect();
        ensure_finite(&pre_grad, "gradient").map_err(|_| non_finite(i + 1, "gradient"))?;
        grad.layers[i].add_outer(&pre_grad, below, scale);
        upstream = params.layers[i].weight.transpose_matvec(&pre_grad)?;
    }
    grad.embedding.add_outer(&upstream, x, scale);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("weighted loss is {loss}")));
    }
    Ok(loss)
}

fn non_finite(layer: usize, what: &str) -> Error {
    Error::Numeric(format!("non-finite {what} at layer {layer}"))
}

/// Weighted total loss of one example, evaluated from logits.
pub fn example_loss(params: &ModelParams, x: &[f64], target: Target) -> Result<f64> {
    let n = params.num_layers();
    let embedded = params.embed(x)?;
    let mut h = embedded;
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        h = params.advance(i, &h)?;
        let raw = params.head_raw(i, &h)?;
        losses.push(match target {
            Target::Class(z) => cross_entropy_from_logits(&raw, z)?,
            Target::Value(y) => loss_regression(raw[0], y),
        });
    }
    total_loss(&losses)
}

/// Class indices or regression values, one per example.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Target {
        match self {
            Targets::Classes(c) => Target::Class(c[i]),
            Targets::Values(v) => Target::Value(v[i]),
        }
    }
}

/// Inputs (`examples × input_dim`) paired with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    targets: Targets,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        if let Targets::Values(v) = &targets {
            ensure_finite(v, "target")?;
        }
        Ok(LabeledDataset { inputs, targets })
    }

    /// Checks class indices against the number of classes of `task`.
    pub fn check_task(&self, task: Task, input_dim: usize) -> Result<()> {
        if self.inputs.cols() != input_dim {
            return Err(Error::Shape(format!(
                "dataset has {} features, model expects {input_dim}",
                self.inputs.cols()
            )));
        }
        match (task, &self.targets) {
            (Task::Classification { num_classes }, Targets::Classes(c)) => {
                match c.iter().find(|&&z| z >= num_classes) {
                    Some(z) => Err(Error::Argument(format!(
                        "class index {z} >= {num_classes} classes"
                    ))),
                    None => Ok(()),
                }
            }
            (Task::Regression, Targets::Values(_)) => Ok(()),
            _ => Err(Error::Argument(
                "dataset targets do not match the task".into(),
            )),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> Target {
        self.targets.get(i)
    }
}

/// Mini-batch SGD with classical momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean total loss over the examples seen in each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains a copy of `params` on `data`. Shuffling is seeded from the model
/// seed, so identical inputs give bit-identical results.
pub fn train(
    params: &ModelParams,
    data: &LabeledDataset,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    data.check_task(params.config.task, params.config.input_dim)?;

    let mut params = params.clone();
    let weights = layer_weights(params.num_layers());
    let mut velocity = ModelParams::zeros(params.config)?;
    let mut batch_grad = ModelParams::zeros(params.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_history = Vec::with_capacity(opt.epochs);

    for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt.batch_size) {
            batch_grad.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let loss = accumulate_gradient(
                    &params,
                    data.input(i),
                    data.target(i),
                    &weights,
                    &mut batch_grad,
                    scale,
                )
                .map_err(|e| match e {
                    Error::Numeric(_) => Error::Divergence { epoch },
                    other => other,
                })?;
                epoch_loss += loss;
            }
            for (v, g) in velocity.tensors_mut().zip(batch_grad.tensors()) {
                for (vv, gv) in v.weight.data_mut().iter_mut().zip(g.weight.data()) {
                    *vv = opt.momentum * *vv + gv;
                }
                for (vv, gv) in v.bias.iter_mut().zip(&g.bias) {
                    *vv = opt.momentum * *vv + gv;
                }
            }
            params.add_scaled(&velocity, -opt.learning_rate);
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite()
            || params
                .tensors()
                .any(|t| t.weight.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Divergence { epoch });
        }
        loss_history.push(mean);
    }
    Ok(TrainOutcome {
        params,
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use proptest::prelude::*;

    fn config(task: Task, layers: usize, hidden: usize, seed: u64) -> StackConfig {
        StackConfig {
            input_dim: 3,
            hidden_dim: hidden,
            num_layers: layers,
            task,
            nonlinearity: Nonlinearity::Tanh,
            seed,
        }
    }

    fn scalar(v: f64) -> Affine {
        Affine {
            weight: Matrix::from_vec(1, 1, vec![v]).unwrap(),
            bias: vec![0.0],
        }
    }

    #[test]
    fn zero_weights_give_uniform_outputs() {
        let cfg = config(Task::Classification { num_classes: 3 }, 4, 5, 0);
        let params = ModelParams::zeros(cfg).unwrap();
        let pass = forward_all(&params, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(pass.outputs.len(), 4);
        for out in &pass.outputs {
            let p = out.distribution().unwrap();
            for &v in p.values() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_traced_regression_pass() {
        let cfg = StackConfig {
            input_dim: 1,
            hidden_dim: 1,
            num_layers: 2,
            task: Task::Regression,
            nonlinearity: Nonlinearity::Relu,
            seed: 0,
        };
        let mut head = scalar(2.0);
        head.bias = vec![1.0];
        let params = ModelParams {
            config: cfg,
            embedding: scalar(1.0),
            layers: vec![scalar(1.0), scalar(1.0)],
            heads: vec![head.clone(), head],
        };
        let pass = forward_all(&params, &[3.0]).unwrap();
        assert_eq!(
            pass.outputs,
            vec![PredictionOutput::Value(7.0), PredictionOutput::Value(7.0)]
        );
        assert_eq!(pass.hidden, vec![vec![3.0], vec![3.0]]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let cfg = config(Task::Regression, 2, 2, 0);
        let params = ModelParams::init(cfg).unwrap();
        assert!(matches!(forward_all(&params, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(Task::Regression, 1, 2, 0);
        assert!(cfg.validate().is_err());
        cfg.num_layers = 2;
        assert!(cfg.validate().is_ok());
        cfg.task = Task::Classification { num_classes: 1 };
        assert!(cfg.validate().is_err());
        cfg.task = Task::Regression;
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn classification_loss_examples() {
        let u = ProbVector::uniform(2).unwrap();
        assert!((loss_classification(&u, 1).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        let p = ProbVector::new(vec![0.75, 0.25]).unwrap();
        assert!((loss_classification(&p, 0).unwrap() - 0.287682).abs() < 1e-6);
        let sure = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(loss_classification(&sure, 0).unwrap(), 0.0);
        // clamp keeps the loss finite
        let l = loss_classification(&sure, 1).unwrap();
        assert!(l.is_finite() && l > 700.0);
        assert!(loss_classification(&sure, 2).is_err());
    }

    #[test]
    fn logit_cross_entropy_matches_probability_form() {
        let logits = [0.3, -1.2, 2.0];
        let p = softmax(&logits).unwrap();
        for z in 0..3 {
            let a = cross_entropy_from_logits(&logits, z).unwrap();
            let b = loss_classification(&p, z).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_loss_examples() {
        assert_eq!(loss_regression(3.0, 3.0), 0.0);
        assert_eq!(loss_regression(2.0, 5.0), 9.0);
        assert_eq!(loss_regression(-1.0, 1.0), 4.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(&[0.7; 5]).unwrap(), 0.7);
        assert!((total_loss(&[3.0, 2.0, 1.0]).unwrap() - 10.0 / 6.0).abs() < 1e-12);
        assert!((total_loss(&[0.0, 4.0]).unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!(matches!(total_loss(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn layer_weights_sum_to_one() {
        for n in 1..20 {
            let s: f64 = layer_weights(n).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_round_trip_and_count() {
        let cfg = config(Task::Classification { num_classes: 4 }, 3, 5, 9);
        let params = ModelParams::init(cfg).unwrap();
        assert_eq!(params.num_params(), cfg.num_params());
        let flat = params.to_flat();
        assert_eq!(ModelParams::from_flat(cfg, &flat).unwrap(), params);
        assert!(ModelParams::from_flat(cfg, &flat[1..]).is_err());
    }

    fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences_classification() {
        let cfg = config(Task::Classification { num_classes: 3 }, 3, 4, 11);
        let params = ModelParams::init(cfg).unwrap();
        let x = [0.4, -0.7, 1.1];
        let bp = backward(&params, &x, Target::Class(2)).unwrap();
        let numeric = finite_diff_grad(
            |flat| {
                let p = ModelParams::from_flat(cfg, flat).unwrap();
                example_loss(&p, &x, Target::Class(2)).unwrap()
            },
            &params.to_flat(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&bp.gradient.to_flat(), &numeric) < 1e-4);
        assert!((bp.loss - example_loss(&params, &x, Target::Class(2)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_head_gradient_on_one_layer_head() {
        // cross-entropy of the first head only, checked against the oracle
        let cfg = config(Task::Classification { num_classes: 2 }, 2, 3, 5);
        let params = ModelParams::init(cfg).unwrap();
        let x = [1.0, 0.5, -0.25];
        let bp = backward_weighted(&params, &x, Target::Class(0), &[1.0, 0.0]).unwrap();
        let numeric = finite_diff_grad(
            |flat| {
                let p = ModelParams::from_flat(cfg, flat).unwrap();
                let h = p.advance(0, &p.embed(&x).unwrap()).unwrap();
                cross_entropy_from_logits(&p.head_raw(0, &h).unwrap(), 0).unwrap()
            },
            &params.to_flat(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&bp.gradient.to_flat(), &numeric) < 1e-4);
    }

    #[test]
    fn gradient_matches_finite_differences_regression_relu() {
        let mut cfg = config(Task::Regression, 3, 4, 3);
        cfg.nonlinearity = Nonlinearity::Relu;
        let mut params = ModelParams::init(cfg).unwrap();
        // positive biases keep pre-activations off the kink at zero
        for layer in &mut params.layers {
            layer.bias.fill(0.3);
        }
        let x = [0.9, 0.2, -0.6];
        let bp = backward(&params, &x, Target::Value(0.3)).unwrap();
        let numeric = finite_diff_grad(
            |flat| {
                let p = ModelParams::from_flat(cfg, flat).unwrap();
                example_loss(&p, &x, Target::Value(0.3)).unwrap()
            },
            &params.to_flat(),
            1e-5,
        )
        .unwrap();
        let err = max_rel_error(&bp.gradient.to_flat(), &numeric);
        assert!(
            err < 1e-4,
            "{err} {:?} {:?}",
            bp.gradient.to_flat(),
            numeric
        );
    }

    #[test]
    fn perfect_regression_fit_has_zero_head_gradient() {
        let cfg = config(Task::Regression, 3, 4, 21);
        let params = ModelParams::init(cfg).unwrap();
        let x = [0.1, 0.2, 0.3];
        let pass = forward_all(&params, &x).unwrap();
        // give every head the same output by zeroing its weights and using the bias
        let mut fitted = params.clone();
        for head in &mut fitted.heads {
            head.weight.data_mut().fill(0.0);
            head.bias = vec![1.5];
        }
        let bp = backward(&fitted, &x, Target::Value(1.5)).unwrap();
        assert_eq!(bp.loss, 0.0);
        for head in &bp.gradient.heads {
            assert!(head.weight.data().iter().all(|&g| g == 0.0));
            assert!(head.bias.iter().all(|&g| g == 0.0));
        }
        assert_eq!(pass.outputs.len(), 3);
    }

    #[test]
    fn final_head_only_is_scaled_single_exit() {
        let cfg = config(Task::Classification { num_classes: 3 }, 3, 4, 8);
        let params = ModelParams::init(cfg).unwrap();
        let x = [0.3, 0.3, -0.9];
        let n = 3;
        let w = layer_weights(n);
        let masked: Vec<f64> = (0..n)
            .map(|j| if j == n - 1 { w[j] } else { 0.0 })
            .collect();
        let single: Vec<f64> = (0..n).map(|j| if j == n - 1 { 1.0 } else { 0.0 }).collect();
        let a = backward_weighted(&params, &x, Target::Class(1), &masked).unwrap();
        let b = backward_weighted(&params, &x, Target::Class(1), &single).unwrap();
        let factor = n as f64 / 6.0;
        for (ga, gb) in a.gradient.to_flat().iter().zip(b.gradient.to_flat()) {
            assert!((ga - factor * gb).abs() <= 1e-14 * gb.abs().max(1.0));
        }
    }

    #[test]
    fn mismatched_target_kind_is_rejected() {
        let cfg = config(Task::Regression, 2, 2, 0);
        let params = ModelParams::init(cfg).unwrap();
        assert!(matches!(
            backward(&params, &[0.0; 3], Target::Class(0)),
            Err(Error::Argument(_))
        ));
    }

    fn blobs(n: usize) -> LabeledDataset {
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            let jitter = (i as f64 * 0.37).sin() * 0.5;
            rows.push(vec![sign * 2.0 + jitter, sign * 1.5 - jitter, jitter]);
            classes.push(c);
        }
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), Targets::Classes(classes)).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let cfg = config(Task::Classification { num_classes: 2 }, 3, 4, 2);
        let params = ModelParams::init(cfg).unwrap();
        let opt = OptimizerConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..OptimizerConfig::default()
        };
        let out = train(&params, &blobs(40), &opt).unwrap();
        assert_eq!(out.params.to_flat(), params.to_flat());
        assert_eq!(out.loss_history.len(), 3);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = config(Task::Classification { num_classes: 2 }, 4, 6, 17);
        let params = ModelParams::init(cfg).unwrap();
        let opt = OptimizerConfig {
            epochs: 10,
            ..OptimizerConfig::default()
        };
        let a = train(&params, &blobs(100), &opt).unwrap();
        let b = train(&params, &blobs(100), &opt).unwrap();
        assert_eq!(a, b);
        assert!(a.loss_history.last().unwrap() < &a.loss_history[0]);
    }

    #[test]
    fn divergence_reports_epoch() {
        let cfg = config(Task::Regression, 3, 4, 1);
        let params = ModelParams::init(cfg).unwrap();
        let data = LabeledDataset::new(
            Matrix::from_rows(&[vec![1e3, -1e3, 1e3], vec![-1e3, 1e3, 5e2]]).unwrap(),
            Targets::Values(vec![1e6, -1e6]),
        )
        .unwrap();
        let opt = OptimizerConfig {
            learning_rate: 1e3,
            epochs: 200,
            ..OptimizerConfig::default()
        };
        assert!(matches!(
            train(&params, &data, &opt),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn train_preconditions() {
        let cfg = config(Task::Classification { num_classes: 2 }, 2, 2, 0);
        let params = ModelParams::init(cfg).unwrap();
        let empty = LabeledDataset::new(Matrix::zeros(0, 3), Targets::Classes(vec![])).unwrap();
        assert!(train(&params, &empty, &OptimizerConfig::default()).is_err());
        let bad = OptimizerConfig {
            epochs: 0,
            ..OptimizerConfig::default()
        };
        assert!(train(&params, &blobs(4), &bad).is_err());
    }

    proptest! {
        #[test]
        fn total_loss_is_strictly_monotone(
            losses in prop::collection::vec(0.0f64..10.0, 1..12),
            pick in 0usize..12,
            bump in 1e-3f64..5.0,
        ) {
            let j = pick % losses.len();
            let mut raised = losses.clone();
            raised[j] += bump;
            prop_assert!(total_loss(&raised).unwrap() > total_loss(&losses).unwrap());
        }

        #[test]
        fn total_loss_of_constant_is_exact(c in 0.0f64..100.0, n in 1usize..40) {
            prop_assert_eq!(total_loss(&vec![c; n]).unwrap(), c);
        }

        #[test]
        fn classification_outputs_are_distributions(
            seed in any::<u64>(),
            x in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let cfg = config(Task::Classification { num_classes: 4 }, 5, 6, seed);
            let params = ModelParams::init(cfg).unwrap();
            let pass = forward_all(&params, &x).unwrap();
            prop_assert_eq!(pass.outputs.len(), 5);
            for out in &pass.outputs {
                let p = out.distribution().unwrap();
                prop_assert!(ProbVector::new(p.values().to_vec()).is_ok());
            }
        }
    }
}
