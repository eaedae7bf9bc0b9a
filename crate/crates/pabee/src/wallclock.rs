//! Wall-clock latency probe. Layer-ratio speed-up stays the primary cost
//! measure; this only reports what the host machine actually spent.

use std::hint::black_box;
use std::time::{Duration, Instant};

use pabee_core::inference::run_instance;
use pabee_core::model::{LabeledDataset, ModelParams};
use pabee_core::policy::PolicyConfig;

use crate::error::{Error, Result};

/// Median over `repeats` passes of the mean per-instance latency of
/// `run_instance` on `data`.
pub fn wallclock_probe(
    params: &ModelParams,
    policy: &PolicyConfig,
    data: &LabeledDataset,
    repeats: usize,
) -> Result<Duration> {
    if repeats < 3 {
        return Err(Error::Core(pabee_core::Error::Argument(format!(
            "repeats must be >= 3, got {repeats}"
        ))));
    }
    if data.is_empty() {
        return Err(Error::Core(pabee_core::Error::Argument(
            "cannot time an empty dataset".into(),
        )));
    }
    data.check_task(params.config.task, params.config.input_dim)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for i in 0..data.len() {
            black_box(run_instance(params, policy, black_box(data.input(i)))?);
        }
        samples.push(start.elapsed() / data.len() as u32);
    }
    samples.sort();
    Ok(samples[repeats / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use pabee_core::model::{Nonlinearity, StackConfig, Targets, Task};
    use pabee_core::numerics::Matrix;

    fn model(hidden: usize) -> ModelParams {
        ModelParams::init(StackConfig {
            input_dim: 2,
            hidden_dim: hidden,
            num_layers: 12,
            task: Task::Classification { num_classes: 2 },
            nonlinearity: Nonlinearity::Tanh,
            seed: 0,
        })
        .unwrap()
    }

    fn data(count: usize) -> LabeledDataset {
        let rows: Vec<f64> = (0..2 * count).map(|i| (i as f64 * 0.37).sin()).collect();
        LabeledDataset::new(
            Matrix::from_vec(count, 2, rows).unwrap(),
            Targets::Classes((0..count).map(|i| i % 2).collect()),
        )
        .unwrap()
    }

    #[test]
    fn too_few_repeats() {
        let err = wallclock_probe(&model(4), &PolicyConfig::Never, &data(4), 1).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn half_depth_is_faster() {
        let params = model(64);
        let d = data(200);
        let full = wallclock_probe(&params, &PolicyConfig::Never, &d, 5).unwrap();
        let half = wallclock_probe(&params, &PolicyConfig::FixedDepth { depth: 6 }, &d, 5).unwrap();
        assert!(half < full, "half {half:?} vs full {full:?}");
    }
}
