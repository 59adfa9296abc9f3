//! Saliency-driven updates of the sensor weight layer.
//!
//! Each round thresholds the current model on a feedback partition, takes
//! the false positives and false negatives of every task, and moves each
//! sensor weight against its wrong-class contribution and with its
//! correct-class contribution. Only w¹ changes; the trunk stays frozen.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{stack, DatasetSplit, Partition, SensorSample};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{evaluate, ConfusionCell, MetricReport};
use crate::model::{predict, Classifier};
use crate::saliency::{clip_small, score_gradients, standardize, time_mean, Class};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Each population moves a weight by `0` or `±alpha` per term.
    #[default]
    Sign,
    /// Steps proportional to the gradients.
    Scaled,
}

/// Which round's weights [`finetune`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest mean validation AUROC.
    #[default]
    Auroc,
    /// Highest mean validation TPR, ties broken by AUROC.
    Recall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub alpha: f64,
    pub theta: f64,
    pub rounds: usize,
    pub gamma_fn: f64,
    pub gamma_fp: f64,
    /// Per-task decision thresholds; empty means 0.5 everywhere.
    pub thresholds: Vec<f64>,
    pub update_mode: UpdateMode,
    /// Standardize per-sample maps before clipping. Without it the raw
    /// products are summed over time, which is exactly ∂S/∂w¹.
    pub standardize: bool,
    /// Partition whose misclassified samples drive the update.
    pub feedback: Partition,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            alpha: 0.02,
            theta: 0.05,
            rounds: 20,
            gamma_fn: 1.0,
            gamma_fp: 1.0,
            thresholds: Vec::new(),
            update_mode: UpdateMode::Sign,
            standardize: true,
            feedback: Partition::Train,
        }
    }
}

impl FinetuneConfig {
    /// Defaults with false negatives weighted 4:1 over false positives.
    pub fn recall_biased() -> Self {
        FinetuneConfig {
            gamma_fn: 4.0,
            gamma_fp: 1.0,
            ..Default::default()
        }
    }

    pub fn thresholds(&self, num_tasks: usize) -> Vec<f64> {
        if self.thresholds.is_empty() {
            vec![0.5; num_tasks]
        } else {
            self.thresholds.clone()
        }
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if !(self.theta >= 0.0) {
            problems.push(format!("theta {} must be non-negative", self.theta));
        }
        if !(self.gamma_fn >= 0.0 && self.gamma_fp >= 0.0) || !(self.gamma_fn + self.gamma_fp > 0.0) {
            problems.push(format!(
                "gamma_fn {} and gamma_fp {} must be non-negative with a positive sum",
                self.gamma_fn, self.gamma_fp
            ));
        }
        if !self.thresholds.is_empty() && self.thresholds.len() != num_tasks {
            problems.push(format!(
                "{} thresholds for {num_tasks} tasks",
                self.thresholds.len()
            ));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            problems.push(format!("threshold {t} outside (0, 1)"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Sample indices of one task, by confusion cell.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPartition {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub tn: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
}

impl TaskPartition {
    pub fn cell(&self, cell: ConfusionCell) -> &[usize] {
        match cell {
            ConfusionCell::TruePositive => &self.tp,
            ConfusionCell::FalsePositive => &self.fp,
            ConfusionCell::TrueNegative => &self.tn,
            ConfusionCell::FalseNegative => &self.fn_,
        }
    }

    fn cell_mut(&mut self, cell: ConfusionCell) -> &mut Vec<usize> {
        match cell {
            ConfusionCell::TruePositive => &mut self.tp,
            ConfusionCell::FalsePositive => &mut self.fp,
            ConfusionCell::TrueNegative => &mut self.tn,
            ConfusionCell::FalseNegative => &mut self.fn_,
        }
    }

    pub fn misclassified(&self) -> usize {
        self.fp.len() + self.fn_.len()
    }

    /// Cell of every labelled sample, as `(index, cell)` in index order.
    pub fn cells(&self) -> Vec<(usize, ConfusionCell)> {
        let mut out: Vec<(usize, ConfusionCell)> = ConfusionCell::ALL
            .into_iter()
            .flat_map(|c| self.cell(c).iter().map(move |&i| (i, c)))
            .collect();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPartition {
    /// `None` for tasks without any labelled sample.
    pub tasks: Vec<Option<TaskPartition>>,
}

impl ConfusionPartition {
    pub fn misclassified(&self) -> usize {
        self.tasks.iter().flatten().map(TaskPartition::misclassified).sum()
    }

    pub fn omitted(&self) -> Vec<usize> {
        (0..self.tasks.len()).filter(|&k| self.tasks[k].is_none()).collect()
    }
}

/// Thresholds the model's probabilities on `samples` and files every
/// labelled sample of each task under its confusion cell.
pub fn partition_confusion<M: Classifier + ?Sized>(
    model: &M,
    samples: &[SensorSample],
    thresholds: &[f64],
) -> Result<ConfusionPartition> {
    let m = model.num_tasks();
    if thresholds.len() != m {
        return Err(Error::Dimension(format!("{} thresholds for {m} tasks", thresholds.len())));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Argument(format!("threshold {t} outside (0, 1)")));
    }
    let probs = predict(model, &stack(samples, model.num_features())?)?.probabilities;
    let tasks = (0..m)
        .map(|k| {
            let mut part = TaskPartition::default();
            let mut any = false;
            for (i, s) in samples.iter().enumerate() {
                if let Some(y) = s.labels[k] {
                    any = true;
                    let predicted = probs.data()[i * m + k] >= thresholds[k];
                    part.cell_mut(ConfusionCell::of(predicted, y)).push(i);
                }
            }
            if !any {
                log::warn!("task {k}: no labelled samples, left out of the partition");
            }
            any.then_some(part)
        })
        .collect();
    Ok(ConfusionPartition { tasks })
}

/// How per-sample `I ⊙ ∂S/∂I¹` maps become a weight gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preprocess {
    /// Standardize, clip at `theta`, then average over time.
    Standardized { theta: f64 },
    /// Sum over time, untouched: the autodiff gradient ∂S/∂w¹.
    Raw,
}

impl Preprocess {
    fn of(cfg: &FinetuneConfig) -> Self {
        if cfg.standardize {
            Preprocess::Standardized { theta: cfg.theta }
        } else {
            Preprocess::Raw
        }
    }
}

/// Mean over `samples` of each sample's preprocessed `I ⊙ ∂S(class)/∂I¹`,
/// a vector of length F.
pub fn weight_gradient<M: Classifier + ?Sized>(
    model: &M,
    samples: &[&Tensor],
    task: usize,
    class: Class,
    prep: Preprocess,
) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Argument("weight gradient needs at least one sample".into()));
    }
    let f = model.num_features();
    let grads = score_gradients(model, samples, task, &vec![class; samples.len()])?;
    let mut acc = vec![0.0; f];
    for (x, g) in samples.iter().zip(&grads.post_weight) {
        let cell = x.zip_map(g, |a, b| a * b)?;
        let v = match prep {
            Preprocess::Standardized { theta } => time_mean(&clip_small(&standardize(&cell), theta)),
            Preprocess::Raw => time_sum(&cell),
        };
        for (a, b) in acc.iter_mut().zip(v.data()) {
            *a += b;
        }
    }
    let n = samples.len() as f64;
    Tensor::new(&[f], acc.into_iter().map(|v| v / n).collect())
}

fn time_sum(map: &Tensor) -> Tensor {
    let mut out = time_mean(map);
    let t = map.shape()[0] as f64;
    out.data_mut().iter_mut().for_each(|v| *v *= t);
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weight change `-α·u(g_wrong) + α·u(g_correct)`, with `u` the sign or the
/// identity depending on `mode`.
pub fn update_step(g_wrong: &Tensor, g_correct: &Tensor, alpha: f64, mode: UpdateMode) -> Result<Tensor> {
    let u = |x: f64| match mode {
        UpdateMode::Sign => sign(x),
        UpdateMode::Scaled => x,
    };
    g_wrong.zip_map(g_correct, |w, c| -alpha * u(w) + alpha * u(c))
}

/// Adds `delta` to the weights, flooring at zero.
pub fn apply_update(weights: &Tensor, delta: &Tensor) -> Result<Tensor> {
    weights.zip_map(delta, |w, d| (w + d).max(0.0))
}

/// Result of one fine-tuning round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Applied change before flooring.
    pub delta: Tensor,
    pub misclassified: usize,
    /// No task had a misclassified sample; the weights did not move.
    pub converged: bool,
    pub partition: ConfusionPartition,
}

/// One update of w¹ from the misclassified `feedback` samples.
///
/// Per task, each non-empty population p ∈ {FP, FN} yields a step from the
/// gradients toward its predicted (wrong) class and its labelled (correct)
/// class. Steps combine as `Σ γ_p Δ_p / max(Σ γ_p, 1)` over the present
/// populations, and the result is averaged over tasks with errors.
pub fn finetune_round<M: Classifier + ?Sized>(
    model: &mut M,
    cfg: &FinetuneConfig,
    feedback: &[SensorSample],
) -> Result<RoundOutcome> {
    let m = model.num_tasks();
    cfg.validate(m)?;
    let f = model.num_features();
    let partition = partition_confusion(model, feedback, &cfg.thresholds(m))?;
    let prep = Preprocess::of(cfg);
    let mut total = vec![0.0; f];
    let mut active = 0usize;
    for (task, part) in partition.tasks.iter().enumerate() {
        let Some(part) = part else { continue };
        if part.misclassified() == 0 {
            continue;
        }
        let mut task_delta = vec![0.0; f];
        let mut weight = 0.0;
        for (cell, gamma) in [
            (ConfusionCell::FalsePositive, cfg.gamma_fp),
            (ConfusionCell::FalseNegative, cfg.gamma_fn),
        ] {
            let idx = part.cell(cell);
            if idx.is_empty() {
                continue;
            }
            weight += gamma;
            if gamma == 0.0 {
                continue;
            }
            let xs: Vec<&Tensor> = idx.iter().map(|&i| &feedback[i].values).collect();
            let wrong = Class::from_label(cell.predicted());
            let g_wrong = weight_gradient(model, &xs, task, wrong, prep)?;
            let g_correct = weight_gradient(model, &xs, task, wrong.opposite(), prep)?;
            let step = update_step(&g_wrong, &g_correct, cfg.alpha, cfg.update_mode)?;
            for (d, s) in task_delta.iter_mut().zip(step.data()) {
                *d += gamma * s;
            }
        }
        let norm = weight.max(1.0);
        for (t, d) in total.iter_mut().zip(&task_delta) {
            *t += d / norm;
        }
        active += 1;
    }
    let misclassified = partition.misclassified();
    if active == 0 {
        return Ok(RoundOutcome {
            delta: Tensor::zeros(&[f]),
            misclassified,
            converged: true,
            partition,
        });
    }
    let delta = Tensor::new(&[f], total.into_iter().map(|v| v / active as f64).collect())?;
    let updated = apply_update(model.sensor_weights(), &delta)?;
    *model.sensor_weights_mut() = updated;
    Ok(RoundOutcome {
        delta,
        misclassified,
        converged: false,
        partition,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: usize,
    pub auroc: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0 is the state before any update.
    pub round: usize,
    pub weights: Vec<f64>,
    /// Validation scores of these weights.
    pub validation: Vec<TaskScore>,
    /// Misclassified feedback samples that produced the next weights.
    pub misclassified: usize,
    pub converged: bool,
}

impl RoundRecord {
    pub fn mean_auroc(&self) -> f64 {
        mean(self.validation.iter().map(|s| s.auroc))
    }

    pub fn mean_tpr(&self) -> f64 {
        mean(self.validation.iter().map(|s| s.tpr))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len().max(1) as f64;
    it.sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    pub rounds: Vec<RoundRecord>,
    pub selection: Selection,
    /// Round whose weights were returned.
    pub selected: usize,
}

impl WeightTrace {
    /// `round,task,auroc,tpr` rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("round,task,auroc,tpr\n");
        for r in &self.rounds {
            for s in &r.validation {
                out.push_str(&format!("{},{},{},{}\n", r.round, s.task, s.auroc, s.tpr));
            }
        }
        out
    }

    /// `round,feature_index,weight` rows.
    pub fn weights_csv(&self) -> String {
        let mut out = String::from("round,feature_index,weight\n");
        for r in &self.rounds {
            for (j, w) in r.weights.iter().enumerate() {
                out.push_str(&format!("{},{j},{w}\n", r.round));
            }
        }
        out
    }

    pub fn write_csv(&self, metrics: &Path, weights: &Path) -> Result<()> {
        write_atomic(metrics, self.metrics_csv().as_bytes())?;
        write_atomic(weights, self.weights_csv().as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<M> {
    pub model: M,
    pub trace: WeightTrace,
}

fn scores(report: &MetricReport) -> Vec<TaskScore> {
    report
        .tasks
        .iter()
        .map(|t| TaskScore {
            task: t.task,
            auroc: t.auroc,
            tpr: t.tpr,
        })
        .collect()
}

fn better(sel: Selection, cand: &RoundRecord, best: &RoundRecord) -> bool {
    match sel {
        Selection::Auroc => cand.mean_auroc() > best.mean_auroc(),
        Selection::Recall => {
            let (ct, bt) = (cand.mean_tpr(), best.mean_tpr());
            ct > bt || (ct == bt && cand.mean_auroc() > best.mean_auroc())
        }
    }
}

/// Runs up to `cfg.rounds` rounds and returns the weights of the round with
/// the best validation score under `selection`, round 0 included.
pub fn finetune_with<M: Classifier + Clone>(
    model: &M,
    cfg: &FinetuneConfig,
    split: &DatasetSplit,
    selection: Selection,
) -> Result<FinetuneOutcome<M>> {
    let m = model.num_tasks();
    cfg.validate(m)?;
    let thresholds = cfg.thresholds(m);
    let feedback = split.part(cfg.feedback);
    let mut current = model.clone();
    let record = |model: &M, round: usize| -> Result<RoundRecord> {
        Ok(RoundRecord {
            round,
            weights: model.sensor_weights().data().to_vec(),
            validation: scores(&evaluate(model, &split.valid, &thresholds, "valid")?),
            misclassified: 0,
            converged: false,
        })
    };
    let mut rounds = vec![record(&current, 0)?];
    let mut best = (0, current.clone());
    for round in 1..=cfg.rounds {
        let outcome = finetune_round(&mut current, cfg, feedback)?;
        let prev = rounds.last_mut().expect("round 0 recorded");
        prev.misclassified = outcome.misclassified;
        if outcome.converged {
            prev.converged = true;
            log::info!("round {round}: no misclassified samples, stopping");
            break;
        }
        let rec = record(&current, round)?;
        log::debug!(
            "round {round}: {} misclassified, valid auroc {:.4} tpr {:.4}",
            outcome.misclassified,
            rec.mean_auroc(),
            rec.mean_tpr()
        );
        if better(selection, &rec, &rounds[best.0]) {
            best = (round, current.clone());
        }
        rounds.push(rec);
    }
    Ok(FinetuneOutcome {
        model: best.1,
        trace: WeightTrace {
            rounds,
            selection,
            selected: best.0,
        },
    })
}

/// Fine-tuning kept at the best validation AUROC.
pub fn finetune<M: Classifier + Clone>(
    model: &M,
    cfg: &FinetuneConfig,
    split: &DatasetSplit,
) -> Result<FinetuneOutcome<M>> {
    finetune_with(model, cfg, split, Selection::Auroc)
}

/// Fine-tuning with false negatives weighted at least as heavily as false
/// positives, kept at the best validation TPR.
pub fn finetune_recall_biased<M: Classifier + Clone>(
    model: &M,
    cfg: &FinetuneConfig,
    split: &DatasetSplit,
) -> Result<FinetuneOutcome<M>> {
    if cfg.gamma_fn < cfg.gamma_fp {
        return Err(Error::Argument(format!(
            "recall-biased fine-tuning needs gamma_fn >= gamma_fp, got {} < {}",
            cfg.gamma_fn, cfg.gamma_fp
        )));
    }
    finetune_with(model, cfg, split, Selection::Recall)
}
