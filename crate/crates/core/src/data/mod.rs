//! Two-time-step sensor samples, CSV ingestion and a synthetic generator.

mod csv;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TrainingSet, TIME_STEPS};
use crate::tensor::Tensor;

pub use self::csv::{load_csv, read_samples, write_csv, write_samples, CsvSchema, SplitPaths};
pub use synthetic::{generate, SplitCounts, SyntheticSpec, TaskCounts};

/// One classification unit: `T × F` readings and a label per task.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSample {
    pub id: String,
    /// Shape `[T, F]`.
    pub values: Tensor,
    /// `None` marks a task without a label for this sample.
    pub labels: Vec<Option<bool>>,
}

impl SensorSample {
    pub fn new(id: impl Into<String>, values: Tensor, labels: Vec<Option<bool>>) -> Result<Self> {
        let id = id.into();
        if values.rank() != 2 || values.shape()[0] != TIME_STEPS {
            return Err(Error::Dimension(format!(
                "sample {id}: values must be [{TIME_STEPS}, F], got {:?}",
                values.shape()
            )));
        }
        if labels.iter().all(Option::is_none) {
            return Err(Error::Argument(format!("sample {id} has no labels")));
        }
        Ok(SensorSample { id, values, labels })
    }

    pub fn num_features(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Overlap between consecutive two-step windows cut from a longer series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowStride {
    /// Consecutive windows share no rows (stride 2).
    #[default]
    NonOverlapping,
    /// Consecutive windows share one row (stride 1).
    Overlapping,
}

impl WindowStride {
    pub fn step(self) -> usize {
        match self {
            WindowStride::NonOverlapping => 2,
            WindowStride::Overlapping => 1,
        }
    }
}

/// Cuts a `[L, F]` series into two-step samples named `{id}#{k}`.
pub fn sliding_windows(
    id: &str,
    series: &Tensor,
    labels: &[Option<bool>],
    stride: WindowStride,
) -> Result<Vec<SensorSample>> {
    series.expect_rank(2, "series")?;
    let (len, f) = (series.shape()[0], series.shape()[1]);
    let mut out = Vec::new();
    let mut start = 0;
    while start + TIME_STEPS <= len {
        let data = series.data()[start * f..(start + TIME_STEPS) * f].to_vec();
        out.push(SensorSample::new(
            format!("{id}#{}", out.len()),
            Tensor::new(&[TIME_STEPS, f], data)?,
            labels.to_vec(),
        )?);
        start += stride.step();
    }
    Ok(out)
}

/// Train, validation and test samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub num_features: usize,
    pub num_tasks: usize,
    pub train: Vec<SensorSample>,
    pub valid: Vec<SensorSample>,
    pub test: Vec<SensorSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Valid, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "valid" => Ok(Partition::Valid),
            "test" => Ok(Partition::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// Negative and positive label counts of one task in one partition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub neg: usize,
    pub pos: usize,
}

impl DatasetSplit {
    pub fn part(&self, p: Partition) -> &[SensorSample] {
        match p {
            Partition::Train => &self.train,
            Partition::Valid => &self.valid,
            Partition::Test => &self.test,
        }
    }

    pub fn part_mut(&mut self, p: Partition) -> &mut Vec<SensorSample> {
        match p {
            Partition::Train => &mut self.train,
            Partition::Valid => &mut self.valid,
            Partition::Test => &mut self.test,
        }
    }

    /// Per-task counts over one partition.
    pub fn counts(&self, p: Partition) -> Vec<LabelCounts> {
        let mut out = vec![LabelCounts::default(); self.num_tasks];
        for s in self.part(p) {
            for (c, l) in out.iter_mut().zip(&s.labels) {
                match l {
                    Some(true) => c.pos += 1,
                    Some(false) => c.neg += 1,
                    None => {}
                }
            }
        }
        out
    }

    /// Checks shapes, label widths and that no id appears in two partitions.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for p in Partition::ALL {
            for s in self.part(p) {
                if s.num_features() != self.num_features || s.labels.len() != self.num_tasks {
                    return Err(Error::Dimension(format!(
                        "sample {} has {} features and {} labels, expected {} and {}",
                        s.id,
                        s.num_features(),
                        s.labels.len(),
                        self.num_features,
                        self.num_tasks
                    )));
                }
                if let Some(prev) = seen.insert(s.id.as_str(), p) {
                    return Err(Error::Argument(format!(
                        "sample id {} appears in both {} and {}",
                        s.id,
                        prev.name(),
                        p.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Model-ready tensors for one partition.
    pub fn training_set(&self, p: Partition) -> TrainingSet {
        to_training_set(self.part(p), self.num_features, self.num_tasks)
    }
}

pub fn to_training_set(samples: &[SensorSample], num_features: usize, num_tasks: usize) -> TrainingSet {
    let n = samples.len();
    let mut inputs = Vec::with_capacity(n * TIME_STEPS * num_features);
    let mut labels = Vec::with_capacity(n * num_tasks);
    let mut mask = Vec::with_capacity(n * num_tasks);
    for s in samples {
        inputs.extend_from_slice(s.values.data());
        for l in &s.labels {
            labels.push(if *l == Some(true) { 1.0 } else { 0.0 });
            mask.push(if l.is_some() { 1.0 } else { 0.0 });
        }
    }
    TrainingSet {
        inputs: Tensor::new(&[n, 1, TIME_STEPS, num_features], inputs).expect("sample shapes"),
        labels: Tensor::new(&[n, num_tasks], labels).expect("label widths"),
        mask: Tensor::new(&[n, num_tasks], mask).expect("label widths"),
    }
}

/// Stacks sample values into a model batch `[N, 1, T, F]`.
pub fn stack<'a>(samples: impl IntoIterator<Item = &'a SensorSample>, num_features: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        if s.num_features() != num_features {
            return Err(Error::Dimension(format!(
                "sample {} has {} features, expected {num_features}",
                s.id,
                s.num_features()
            )));
        }
        data.extend_from_slice(s.values.data());
        n += 1;
    }
    Tensor::new(&[n, 1, TIME_STEPS, num_features], data)
}

/// `n_neg / n_pos` per task over the training partition.
pub fn class_weights(split: &DatasetSplit) -> Result<Vec<f64>> {
    split
        .counts(Partition::Train)
        .iter()
        .enumerate()
        .map(|(task, c)| {
            if c.pos == 0 {
                Err(Error::Argument(format!(
                    "task {task} has no positive training samples"
                )))
            } else {
                Ok(c.neg as f64 / c.pos as f64)
            }
        })
        .collect()
}

/// Per-feature standardization fitted on the training partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: Tensor,
    pub std: Tensor,
}

impl FeatureScaler {
    pub const MIN_STD: f64 = 1e-12;

    /// Statistics pooled over both time steps of every training sample.
    pub fn fit(samples: &[SensorSample], num_features: usize) -> Result<Self> {
        let count = samples.len() * TIME_STEPS;
        if count == 0 {
            return Err(Error::Argument("cannot fit a scaler on zero samples".into()));
        }
        let mut mean = vec![0.0; num_features];
        for s in samples {
            for row in s.values.data().chunks(num_features) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; num_features];
        for s in samples {
            for row in s.values.data().chunks(num_features) {
                for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m).powi(2);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s < Self::MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(FeatureScaler {
            mean: Tensor::from_vec(mean),
            std: Tensor::from_vec(std),
        })
    }

    pub fn identity(num_features: usize) -> Self {
        FeatureScaler {
            mean: Tensor::zeros(&[num_features]),
            std: Tensor::ones(&[num_features]),
        }
    }

    pub fn transform(&self, sample: &SensorSample) -> SensorSample {
        let f = self.mean.numel();
        let mut out = sample.clone();
        for row in out.values.data_mut().chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn transform_split(&self, split: &DatasetSplit) -> DatasetSplit {
        let map = |v: &[SensorSample]| v.iter().map(|s| self.transform(s)).collect();
        DatasetSplit {
            num_features: split.num_features,
            num_tasks: split.num_tasks,
            train: map(&split.train),
            valid: map(&split.valid),
            test: map(&split.test),
        }
    }
}
