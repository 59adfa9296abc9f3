//! Imbalanced multi-task sensor data with planted structure.
//!
//! Every feature of every sample starts as Gaussian noise. A sample that is
//! positive for task `k` has each of task `k`'s informative features shifted
//! by `signal` at both time steps. In the training partition only, a random
//! subset of samples also carries a class-correlated shift on the nuisance
//! features, so a model can lean on them during training although they carry
//! no information at validation or test time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Partition, SensorSample};
use crate::error::{Error, Result};
use crate::model::TIME_STEPS;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub neg: usize,
    pub pos: usize,
}

impl SplitCounts {
    pub fn new(neg: usize, pos: usize) -> Self {
        SplitCounts { neg, pos }
    }

    pub fn total(&self) -> usize {
        self.neg + self.pos
    }
}

/// Label counts of one task in each partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub train: SplitCounts,
    pub valid: SplitCounts,
    pub test: SplitCounts,
}

impl TaskCounts {
    pub fn get(&self, p: Partition) -> SplitCounts {
        match p {
            Partition::Train => self.train,
            Partition::Valid => self.valid,
            Partition::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_features: usize,
    pub tasks: Vec<TaskCounts>,
    /// Feature indices shifted on positives, one list per task.
    pub informative: Vec<Vec<usize>>,
    /// Feature indices that are class-correlated only on part of the
    /// training partition.
    pub nuisance: Vec<usize>,
    /// Shift applied to informative features of positives.
    pub signal: f64,
    /// Shift of nuisance features on corrupted training positives, in units
    /// of `noise`.
    pub nuisance_shift: f64,
    /// Fraction of training samples eligible for the nuisance shift.
    pub nuisance_fraction: f64,
    /// Standard deviation of the baseline Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Desk-scale single task: 24 features, 2000:40 training imbalance.
    fn default() -> Self {
        SyntheticSpec {
            num_features: 24,
            tasks: vec![TaskCounts {
                train: SplitCounts::new(2000, 40),
                valid: SplitCounts::new(1000, 20),
                test: SplitCounts::new(1000, 20),
            }],
            informative: vec![vec![1, 6, 11, 16]],
            nuisance: vec![3, 8, 13, 18, 21],
            signal: 1.0,
            nuisance_shift: 3.0,
            nuisance_fraction: 0.5,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Multi-task benchmark at 50:1 imbalance with disjoint informative sets
    /// per task, one shared nuisance set and leftover pure-noise features.
    pub fn benchmark(num_tasks: usize, seed: u64) -> Self {
        let num_features = 24;
        let nuisance = vec![2, 7, 12, 17, 22];
        let free: Vec<usize> = (0..num_features).filter(|f| !nuisance.contains(f)).collect();
        // Interleave tasks so each task's features spread across the sensor axis.
        let informative = (0..num_tasks)
            .map(|k| free.iter().copied().skip(k).step_by(num_tasks.max(1) + 1).take(4).collect())
            .collect();
        SyntheticSpec {
            num_features,
            tasks: vec![
                TaskCounts {
                    train: SplitCounts::new(2000, 40),
                    valid: SplitCounts::new(1500, 30),
                    test: SplitCounts::new(2000, 40),
                };
                num_tasks
            ],
            informative,
            nuisance,
            seed,
            ..Default::default()
        }
    }

    /// Features that are neither informative for any task nor nuisance.
    pub fn noise_features(&self) -> Vec<usize> {
        (0..self.num_features)
            .filter(|f| !self.nuisance.contains(f) && !self.informative.iter().any(|s| s.contains(f)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_features == 0 {
            problems.push("num_features must be positive".to_string());
        }
        if self.tasks.is_empty() {
            problems.push("at least one task is required".to_string());
        }
        if self.informative.len() != self.tasks.len() {
            problems.push(format!(
                "{} informative sets for {} tasks",
                self.informative.len(),
                self.tasks.len()
            ));
        }
        for (k, set) in self.informative.iter().enumerate() {
            for f in set {
                if *f >= self.num_features {
                    problems.push(format!("task {k}: informative feature {f} out of range"));
                }
                if self.nuisance.contains(f) {
                    problems.push(format!("task {k}: feature {f} is both informative and nuisance"));
                }
            }
        }
        if let Some(f) = self.nuisance.iter().find(|&&f| f >= self.num_features) {
            problems.push(format!("nuisance feature {f} out of range"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            problems.push(format!("noise {} must be finite and non-negative", self.noise));
        }
        if !(0.0..=1.0).contains(&self.nuisance_fraction) {
            problems.push(format!("nuisance_fraction {} outside [0, 1]", self.nuisance_fraction));
        }
        if !self.signal.is_finite() || !self.nuisance_shift.is_finite() {
            problems.push("shifts must be finite".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        for (k, t) in self.tasks.iter().enumerate() {
            if t.train.pos == 0 || t.train.neg == 0 {
                return Err(Error::Argument(format!(
                    "task {k}: training needs both classes, got {} negative / {} positive",
                    t.train.neg, t.train.pos
                )));
            }
            for p in [Partition::Valid, Partition::Test] {
                if t.get(p).pos == 0 {
                    return Err(Error::Argument(format!(
                        "task {k}: {} partition needs at least one positive",
                        p.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws a split from `spec`; identical specs give identical splits.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.num_features;
    let mut split = DatasetSplit {
        num_features: f,
        num_tasks: spec.tasks.len(),
        ..Default::default()
    };
    for part in Partition::ALL {
        let n = spec.tasks.iter().map(|t| t.get(part).total()).max().unwrap_or(0);
        let mut labels = vec![vec![None; spec.tasks.len()]; n];
        let mut idx: Vec<usize> = (0..n).collect();
        for (k, t) in spec.tasks.iter().enumerate() {
            let c = t.get(part);
            idx.shuffle(&mut rng);
            for (rank, &i) in idx.iter().take(c.total()).enumerate() {
                labels[i][k] = Some(rank < c.pos);
            }
        }

        let mut values: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..TIME_STEPS * f)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        spec.noise * z
                    })
                    .collect()
            })
            .collect();
        for (v, lab) in values.iter_mut().zip(&labels) {
            for (k, set) in spec.informative.iter().enumerate() {
                if lab[k] == Some(true) {
                    shift(v, f, set, spec.signal);
                }
            }
        }
        if part == Partition::Train {
            let corrupted = (spec.nuisance_fraction * n as f64).round() as usize;
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(corrupted) {
                if labels[i].contains(&Some(true)) {
                    shift(&mut values[i], f, &spec.nuisance, spec.nuisance_shift * spec.noise);
                }
            }
        }

        *split.part_mut(part) = values
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (v, lab))| {
                SensorSample::new(
                    format!("{}-{i:06}", part.name()),
                    Tensor::new(&[TIME_STEPS, f], v)?,
                    lab,
                )
            })
            .collect::<Result<_>>()?;
    }
    Ok(split)
}

fn shift(values: &mut [f64], f: usize, features: &[usize], by: f64) {
    for row in values.chunks_mut(f) {
        for &j in features {
            row[j] += by;
        }
    }
}
