//! Seeded synthetic datasets standing in for real benchmark tasks.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, Targets, Task};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetKind {
    /// Isotropic Gaussian clusters with centres evenly spaced on a circle of
    /// diameter `separation` in the first two input dimensions.
    GaussianBlobs {
        num_classes: usize,
        separation: f64,
        noise: f64,
    },
    /// Two interleaved 1.5-turn spirals in the unit disc.
    TwoSpirals { noise: f64 },
    /// `sin(πx₀) + ½·sin(2πx₁)` plus Gaussian noise, standardized.
    RegressionWave { noise: f64 },
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::GaussianBlobs { .. } => "gaussian_blobs",
            DatasetKind::TwoSpirals { .. } => "two_spirals",
            DatasetKind::RegressionWave { .. } => "regression_wave",
        }
    }

    pub fn task(&self) -> Task {
        match *self {
            DatasetKind::GaussianBlobs { num_classes, .. } => Task::Classification { num_classes },
            DatasetKind::TwoSpirals { .. } => Task::Classification { num_classes: 2 },
            DatasetKind::RegressionWave { .. } => Task::Regression,
        }
    }

    fn noise(&self) -> f64 {
        match *self {
            DatasetKind::GaussianBlobs { noise, .. }
            | DatasetKind::TwoSpirals { noise }
            | DatasetKind::RegressionWave { noise } => noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub num_train: usize,
    pub num_eval: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_eval == 0 {
            return Err(Error::Argument(format!(
                "num_train and num_eval must be >= 1, got {} and {}",
                self.num_train, self.num_eval
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Argument("input_dim must be >= 1".into()));
        }
        let noise = self.kind.noise();
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Argument(format!("noise must be >= 0, got {noise}")));
        }
        match self.kind {
            DatasetKind::GaussianBlobs {
                num_classes,
                separation,
                ..
            } => {
                if num_classes < 2 {
                    return Err(Error::Argument("blobs need >= 2 classes".into()));
                }
                if !(separation > 0.0 && separation.is_finite()) {
                    return Err(Error::Argument(format!(
                        "separation must be > 0, got {separation}"
                    )));
                }
            }
            DatasetKind::TwoSpirals { .. } => {
                if self.input_dim < 2 {
                    return Err(Error::Argument("two_spirals needs input_dim >= 2".into()));
                }
            }
            DatasetKind::RegressionWave { .. } => {}
        }
        Ok(())
    }
}

/// Generates `(train, eval)`. The two splits come from disjoint segments of
/// one seeded stream; classification labels are balanced within ±1 per split
/// and regression targets are standardized with the training statistics.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        DatasetKind::RegressionWave { noise } => {
            let (train_x, mut train_y) =
                wave_split(spec.num_train, spec.input_dim, noise, &mut rng);
            let (eval_x, mut eval_y) = wave_split(spec.num_eval, spec.input_dim, noise, &mut rng);
            let (mean, std) = moments(&train_y);
            for y in train_y.iter_mut().chain(eval_y.iter_mut()) {
                *y = (*y - mean) / std;
            }
            Ok((
                dataset(train_x, spec.input_dim, Targets::Values(train_y))?,
                dataset(eval_x, spec.input_dim, Targets::Values(eval_y))?,
            ))
        }
        kind => {
            let train = class_split(kind, spec.num_train, spec.input_dim, &mut rng)?;
            let eval = class_split(kind, spec.num_eval, spec.input_dim, &mut rng)?;
            Ok((train, eval))
        }
    }
}

fn dataset(rows: Vec<f64>, dim: usize, targets: Targets) -> Result<LabeledDataset> {
    LabeledDataset::new(Matrix::from_vec(targets.len(), dim, rows)?, targets)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn class_split(
    kind: DatasetKind,
    count: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let num_classes = kind.task().output_dim();
    let mut labels: Vec<usize> = (0..count).map(|i| i % num_classes).collect();
    labels.shuffle(rng);
    let noise = kind.noise();
    let mut rows = Vec::with_capacity(count * dim);
    for &label in &labels {
        let start = rows.len();
        match kind {
            DatasetKind::GaussianBlobs { separation, .. } => {
                let radius = separation / 2.0;
                if dim == 1 {
                    rows.push(label as f64 * separation);
                } else {
                    let angle = 2.0 * PI * label as f64 / num_classes as f64;
                    rows.push(radius * libm::cos(angle));
                    rows.push(radius * libm::sin(angle));
                }
            }
            DatasetKind::TwoSpirals { .. } => {
                let s = libm::sqrt(rng.random::<f64>());
                let theta = 3.0 * PI * s;
                let sign = if label == 0 { 1.0 } else { -1.0 };
                rows.push(sign * s * libm::cos(theta));
                rows.push(sign * s * libm::sin(theta));
            }
            DatasetKind::RegressionWave { .. } => unreachable!("handled by the caller"),
        }
        rows.resize(start + dim, 0.0);
        for v in &mut rows[start..] {
            *v += noise * gaussian(rng);
        }
    }
    dataset(rows, dim, Targets::Classes(labels))
}

fn wave_split(count: usize, dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut rows = Vec::with_capacity(count * dim);
    let mut targets = Vec::with_capacity(count);
    for _ in 0..count {
        let start = rows.len();
        rows.extend((0..dim).map(|_| rng.random_range(-1.0..1.0)));
        let x = &rows[start..];
        let mut y = libm::sin(PI * x[0]);
        if dim > 1 {
            y += 0.5 * libm::sin(2.0 * PI * x[1]);
        }
        targets.push(y + noise * gaussian(rng));
    }
    (rows, targets)
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    (mean, if std > 0.0 { std } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind) -> DatasetSpec {
        DatasetSpec {
            kind,
            num_train: 101,
            num_eval: 37,
            input_dim: 3,
            seed: 9,
        }
    }

    fn blobs() -> DatasetKind {
        DatasetKind::GaussianBlobs {
            num_classes: 3,
            separation: 10.0,
            noise: 0.1,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        for kind in [
            blobs(),
            DatasetKind::TwoSpirals { noise: 0.15 },
            DatasetKind::RegressionWave { noise: 0.1 },
        ] {
            assert_eq!(
                gen_synthetic(&spec(kind)).unwrap(),
                gen_synthetic(&spec(kind)).unwrap()
            );
        }
        let mut other = spec(blobs());
        other.seed = 10;
        assert_ne!(
            gen_synthetic(&spec(blobs())).unwrap(),
            gen_synthetic(&other).unwrap()
        );
    }

    #[test]
    fn labels_are_balanced() {
        for kind in [blobs(), DatasetKind::TwoSpirals { noise: 0.15 }] {
            let (train, eval) = gen_synthetic(&spec(kind)).unwrap();
            for split in [&train, &eval] {
                let Targets::Classes(labels) = split.targets() else {
                    panic!()
                };
                let k = kind.task().output_dim();
                let counts: Vec<usize> = (0..k)
                    .map(|c| labels.iter().filter(|&&z| z == c).count())
                    .collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{counts:?}");
            }
        }
    }

    #[test]
    fn regression_targets_standardized() {
        let (train, eval) =
            gen_synthetic(&spec(DatasetKind::RegressionWave { noise: 0.1 })).unwrap();
        let Targets::Values(y) = train.targets() else {
            panic!()
        };
        let (mean, std) = moments(y);
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
        assert_eq!(eval.len(), 37);
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut s = spec(blobs());
        s.num_eval = 0;
        assert!(matches!(gen_synthetic(&s), Err(Error::Argument(_))));
        let mut s = spec(DatasetKind::TwoSpirals { noise: 0.1 });
        s.input_dim = 1;
        assert!(gen_synthetic(&s).is_err());
        let mut s = spec(DatasetKind::TwoSpirals { noise: -0.1 });
        s.input_dim = 2;
        assert!(gen_synthetic(&s).is_err());
    }

    #[test]
    fn spirals_stay_near_unit_disc() {
        let mut s = spec(DatasetKind::TwoSpirals { noise: 0.0 });
        s.input_dim = 2;
        let (train, _) = gen_synthetic(&s).unwrap();
        for row in train.inputs().iter_rows() {
            assert!(libm::sqrt(row[0] * row[0] + row[1] * row[1]) <= 1.0 + 1e-12);
        }
    }
}
