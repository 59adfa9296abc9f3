//! AUROC and recall.

use serde::{Deserialize, Serialize};

use crate::data::{stack, SensorSample};
use crate::error::{Error, Result};
use crate::model::{predict, Classifier};

/// Area under the ROC curve as the normalized Mann-Whitney statistic, with
/// tied scores sharing their mean rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Argument(format!(
            "AUROC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share their midpoint.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += midrank * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// True positive rate `tp / (tp + fn)`.
pub fn tpr(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::Argument("TPR needs at least one positive".into()));
    }
    let tp = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p && y)
        .count();
    Ok(tp as f64 / positives as f64)
}

/// Cell of the confusion matrix for one thresholded prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConfusionCell {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "FP")]
    FalsePositive,
    #[serde(rename = "TN")]
    TrueNegative,
    #[serde(rename = "FN")]
    FalseNegative,
}

impl ConfusionCell {
    pub const ALL: [ConfusionCell; 4] = [
        ConfusionCell::TruePositive,
        ConfusionCell::FalsePositive,
        ConfusionCell::TrueNegative,
        ConfusionCell::FalseNegative,
    ];

    pub fn of(predicted: bool, label: bool) -> Self {
        match (predicted, label) {
            (true, true) => ConfusionCell::TruePositive,
            (true, false) => ConfusionCell::FalsePositive,
            (false, false) => ConfusionCell::TrueNegative,
            (false, true) => ConfusionCell::FalseNegative,
        }
    }

    pub fn predicted(self) -> bool {
        matches!(self, ConfusionCell::TruePositive | ConfusionCell::FalsePositive)
    }

    pub fn label(self) -> bool {
        matches!(self, ConfusionCell::TruePositive | ConfusionCell::FalseNegative)
    }

    pub fn is_error(self) -> bool {
        self.predicted() != self.label()
    }

    pub fn name(self) -> &'static str {
        match self {
            ConfusionCell::TruePositive => "TP",
            ConfusionCell::FalsePositive => "FP",
            ConfusionCell::TrueNegative => "TN",
            ConfusionCell::FalseNegative => "FN",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predictions: &[bool], labels: &[bool]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub auroc: f64,
    pub tpr: f64,
    pub counts: ConfusionCounts,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl TaskMetrics {
    /// Metrics for one task from scores, thresholded predictions and labels.
    pub fn compute(task: usize, scores: &[f64], threshold: f64, labels: &[bool]) -> Result<Self> {
        let predictions: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        let counts = ConfusionCounts::from_predictions(&predictions, labels);
        Ok(TaskMetrics {
            task,
            auroc: auroc(scores, labels)?,
            tpr: tpr(&predictions, labels)?,
            n_pos: counts.tp + counts.fn_,
            n_neg: counts.fp + counts.tn,
            counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricReport {
    pub fn mean_auroc(&self) -> f64 {
        self.tasks.iter().map(|t| t.auroc).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn mean_tpr(&self) -> f64 {
        self.tasks.iter().map(|t| t.tpr).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    pub fn task(&self, task: usize) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Scores every labelled sample of each task with `model` and reports
/// AUROC, TPR and confusion counts at the given thresholds.
pub fn evaluate<M: Classifier + ?Sized>(
    model: &M,
    samples: &[SensorSample],
    thresholds: &[f64],
    split: &str,
) -> Result<MetricReport> {
    let m = model.num_tasks();
    if thresholds.len() != m {
        return Err(Error::Dimension(format!("{} thresholds for {m} tasks", thresholds.len())));
    }
    let probs = predict(model, &stack(samples, model.num_features())?)?.probabilities;
    let tasks = (0..m)
        .map(|k| {
            let (scores, labels): (Vec<f64>, Vec<bool>) = samples
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.labels[k].map(|y| (probs.data()[i * m + k], y)))
                .unzip();
            TaskMetrics::compute(k, &scores, thresholds[k], &labels)
                .map_err(|e| Error::Argument(format!("{split} task {k}: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        split: split.to_string(),
        tasks,
    })
}
