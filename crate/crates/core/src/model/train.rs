use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelParams, TaskOutput};
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Model-ready arrays: inputs `[N,1,T,F]`, labels and masks `[N,tasks]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Tensor,
    pub labels: Tensor,
    pub mask: Tensor,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Rows `idx` gathered into a new set.
    pub fn select(&self, idx: &[usize]) -> TrainingSet {
        fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
            let per = t.numel() / t.shape()[0].max(1);
            let mut shape = t.shape().to_vec();
            shape[0] = idx.len();
            let mut data = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            Tensor::new(&shape, data).expect("gathered rows keep their width")
        }
        TrainingSet {
            inputs: gather(&self.inputs, idx),
            labels: gather(&self.labels, idx),
            mask: gather(&self.mask, idx),
        }
    }

    /// Labels of one task as `(row, label)` for every labeled row.
    pub fn task_labels(&self, task: usize) -> Vec<(usize, bool)> {
        let m = self.num_tasks();
        (0..self.len())
            .filter(|&i| self.mask.data()[i * m + task] != 0.0)
            .map(|i| (i, self.labels.data()[i * m + task] != 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-task positive-class weights; derived from the training labels
    /// when absent.
    pub beta: Option<Vec<f64>>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-2,
            beta: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch SGD on the weighted cross-entropy. The sensor weights are not
/// touched.
pub fn train<R: Rng + ?Sized>(
    params: &ModelParams,
    data: &TrainingSet,
    hyper: &TrainHyper,
    beta: &[f64],
    rng: &mut R,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let m = params.config.num_tasks;
    if data.num_tasks() != m || beta.len() != m {
        return Err(Error::Dimension(format!(
            "model has {m} tasks, data has {}, beta has {}",
            data.num_tasks(),
            beta.len()
        )));
    }
    for task in 0..m {
        let labels = data.task_labels(task);
        let pos = labels.iter().filter(|(_, y)| *y).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::Argument(format!(
                "task {task} needs at least one positive and one negative training sample \
                 ({pos} positive of {})",
                labels.len()
            )));
        }
    }

    let mut params = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(hyper.batch_size) {
            // Batch statistics of a single sample are degenerate.
            if idx.len() < 2 {
                continue;
            }
            let batch = data.select(idx);
            if batch.mask.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let loss = sgd_step(&mut params, &batch, hyper.learning_rate, beta, rng)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        log::debug!("epoch {epoch}: loss {mean:.6}");
        loss_trace.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            epoch: hyper.epochs.saturating_sub(1),
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome { params, loss_trace })
}

fn sgd_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    batch: &TrainingSet,
    lr: f64,
    beta: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.leaf(batch.inputs.clone());
    let fwd = params.forward(&mut tape, &vars, x, Mode::Train, rng)?;
    let loss = tape.weighted_bce(fwd.probs, batch.labels.clone(), batch.mask.clone(), beta.to_vec())?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    let wrt = vars.trainable();
    let grads = tape.backward(loss, &wrt)?;

    let channels = params.config.kernels_per_branch;
    for (branch, &bn) in params.branches.iter_mut().zip(&fwd.bn_nodes) {
        let saved = tape.batch_norm_saved(bn).expect("train mode records batch statistics");
        let count = tape.value(bn).numel() / channels;
        ops::update_running_stats(&mut branch.stats, saved, count);
    }

    for (tensor, var) in params.trainable_mut().into_iter().zip(wrt) {
        let g = grads.wrt(var);
        for (p, d) in tensor.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
    Ok(loss_value)
}

/// 1 where the probability reaches the task's threshold, else 0.
pub fn predict_classes(output: &TaskOutput, thresholds: &[f64]) -> Result<Tensor> {
    let probs = &output.probabilities;
    let m = probs.shape()[1];
    if thresholds.len() != m {
        return Err(Error::Dimension(format!(
            "{} thresholds for {m} tasks",
            thresholds.len()
        )));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Argument(format!("threshold {t} outside (0, 1)")));
    }
    let data = probs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| if p >= thresholds[i % m] { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(probs.shape(), data)
}
