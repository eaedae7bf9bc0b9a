//! Early-exit rules consulted after every head.
//!
//! The patience rule counts how many consecutive heads agreed with their
//! immediate predecessor: same argmax for classification, a change smaller
//! than `tau` for regression. Inference stops at the first layer where the
//! count reaches the patience `t`.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::model::PredictionOutput;
use crate::numerics::{entropy, ProbVector};

/// Patience used when none is configured.
pub const DEFAULT_PATIENCE: usize = 6;
/// Regression agreement threshold, in standardized target units.
pub const DEFAULT_TAU: f64 = 0.1;

/// A head's point prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(usize),
    Value(f64),
}

impl Prediction {
    pub fn of(output: &PredictionOutput) -> Self {
        match output {
            PredictionOutput::Distribution(p) => Prediction::Class(p.argmax()),
            PredictionOutput::Value(v) => Prediction::Value(*v),
        }
    }
}

/// Agreement counter plus the previous head's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PatienceState {
    pub cnt: usize,
    pub prev: Option<Prediction>,
}

impl PatienceState {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn patience_update_classification(state: PatienceState, y: &ProbVector) -> PatienceState {
    let label = y.argmax();
    let agrees = matches!(state.prev, Some(Prediction::Class(prev)) if prev == label);
    PatienceState {
        cnt: if agrees { state.cnt + 1 } else { 0 },
        prev: Some(Prediction::Class(label)),
    }
}

/// `|y − prev| < tau` extends the streak; a difference of exactly `tau` resets it.
pub fn patience_update_regression(state: PatienceState, y: f64, tau: f64) -> PatienceState {
    let agrees = matches!(state.prev, Some(Prediction::Value(prev)) if (y - prev).abs() < tau);
    PatienceState {
        cnt: if agrees { state.cnt + 1 } else { 0 },
        prev: Some(Prediction::Value(y)),
    }
}

pub fn should_exit_patience(state: &PatienceState, t: usize) -> bool {
    state.cnt == t
}

/// Fires when the prediction entropy (nats) is strictly below `threshold`.
pub fn should_exit_entropy(y: &ProbVector, threshold: f64) -> bool {
    entropy(y) < threshold
}

/// Fires when the top probability strictly exceeds `threshold`.
pub fn should_exit_maxprob(y: &ProbVector, threshold: f64) -> bool {
    y.max() > threshold
}

/// Which exit rule to apply and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyConfig {
    Patience {
        t: usize,
        tau: f64,
    },
    Entropy {
        threshold: f64,
    },
    MaxProb {
        threshold: f64,
    },
    FixedDepth {
        depth: usize,
    },
    /// Always run the full stack.
    Never,
}

impl PolicyConfig {
    pub fn patience(t: usize) -> Self {
        PolicyConfig::Patience {
            t,
            tau: DEFAULT_TAU,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PolicyConfig::Patience { .. } => "patience",
            PolicyConfig::Entropy { .. } => "entropy",
            PolicyConfig::MaxProb { .. } => "maxprob",
            PolicyConfig::FixedDepth { .. } => "fixed_depth",
            PolicyConfig::Never => "never",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicyConfig::Patience { t, tau } => {
                if t == 0 {
                    return Err(Error::Argument("patience t must be >= 1".into()));
                }
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(Error::Argument(format!("tau must be > 0, got {tau}")));
                }
            }
            PolicyConfig::Entropy { threshold } | PolicyConfig::MaxProb { threshold } => {
                if threshold.is_nan() {
                    return Err(Error::Argument("threshold is NaN".into()));
                }
            }
            PolicyConfig::FixedDepth { depth } => {
                if depth == 0 {
                    return Err(Error::Argument("fixed depth must be >= 1".into()));
                }
            }
            PolicyConfig::Never => {}
        }
        Ok(())
    }

    /// Short stable label, e.g. `patience:t=6`.
    pub fn descriptor(&self) -> String {
        match *self {
            PolicyConfig::Patience { t, tau } => format!("patience:t={t}:tau={tau}"),
            PolicyConfig::Entropy { threshold } => format!("entropy:threshold={threshold}"),
            PolicyConfig::MaxProb { threshold } => format!("maxprob:threshold={threshold}"),
            PolicyConfig::FixedDepth { depth } => format!("fixed_depth:depth={depth}"),
            PolicyConfig::Never => String::from("never"),
        }
    }

    /// Fresh per-instance decision state.
    pub fn start(&self) -> ExitMonitor {
        ExitMonitor {
            policy: *self,
            patience: PatienceState::new(),
            layer: 0,
        }
    }
}

/// Per-instance state of a policy while layers are evaluated.
#[derive(Debug, Clone)]
pub struct ExitMonitor {
    policy: PolicyConfig,
    patience: PatienceState,
    layer: usize,
}

impl ExitMonitor {
    /// Feeds the next head's output and reports whether to stop here.
    pub fn observe(&mut self, output: &PredictionOutput) -> Result<bool> {
        self.layer += 1;
        match self.policy {
            PolicyConfig::Patience { t, tau } => {
                self.patience = match output {
                    PredictionOutput::Distribution(p) => {
                        patience_update_classification(self.patience, p)
                    }
                    PredictionOutput::Value(v) => {
                        patience_update_regression(self.patience, *v, tau)
                    }
                };
                Ok(should_exit_patience(&self.patience, t))
            }
            PolicyConfig::Entropy { threshold } => Ok(should_exit_entropy(
                distribution(output, "entropy")?,
                threshold,
            )),
            PolicyConfig::MaxProb { threshold } => Ok(should_exit_maxprob(
                distribution(output, "maxprob")?,
                threshold,
            )),
            PolicyConfig::FixedDepth { depth } => Ok(self.layer >= depth),
            PolicyConfig::Never => Ok(false),
        }
    }

    pub fn patience_state(&self) -> &PatienceState {
        &self.patience
    }
}

fn distribution<'a>(output: &'a PredictionOutput, kind: &str) -> Result<&'a ProbVector> {
    output.distribution().ok_or_else(|| {
        Error::Argument(format!(
            "the {kind} policy needs class distributions, not regression outputs"
        ))
    })
}
