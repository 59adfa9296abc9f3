//! The parallel-branch dilated CNN and its sensor weight layer.
//!
//! ```text
//! input[N,1,T,F] ⊙ w¹ ─┬─ conv(T×1)        ─ bn ─ relu ─ pool ─┐
//!                      ├─ conv(T×3)        ─ bn ─ relu ─ pool ─┼─ concat ─ dropout ─ dense ─ relu ─ dense ─ sigmoid
//!                      └─ conv(T×5, dil d) ─ bn ─ relu ─ pool ─┘
//! ```

mod probe;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Dilation, RunningStats};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

pub use crate::ops::{weighted_bce, PROB_EPS};
pub use probe::LinearProbe;
pub use train::{predict_classes, train, TrainHyper, TrainOutcome, TrainingSet};

/// A classifier whose first layer is the per-sensor weight layer.
///
/// Implementors record everything after that layer; [`record_logits`] adds
/// the layer itself. Recording is always in infer mode.
pub trait Classifier {
    fn num_features(&self) -> usize;
    fn num_tasks(&self) -> usize;
    fn time_steps(&self) -> usize {
        TIME_STEPS
    }
    fn sensor_weights(&self) -> &Tensor;
    fn sensor_weights_mut(&mut self) -> &mut Tensor;
    /// Logits `[N, tasks]` from the weight-layer output I¹ `[N, 1, T, F]`.
    fn record_trunk(&self, tape: &mut Tape, weighted: Var) -> Result<Var>;
}

/// Tape handles for a full infer-mode pass of a [`Classifier`].
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    pub input: Var,
    pub sensor_weights: Var,
    pub weighted: Var,
    pub logits: Var,
}

/// Records `input ⊙ w¹` and the trunk for a batch `[N, 1, T, F]`.
pub fn record_logits<M: Classifier + ?Sized>(
    model: &M,
    tape: &mut Tape,
    inputs: Tensor,
) -> Result<Recorded> {
    check_batch(model, &inputs)?;
    let input = tape.leaf(inputs);
    let sensor_weights = tape.leaf(model.sensor_weights().clone());
    let weighted = tape.scale_last_axis(input, sensor_weights)?;
    let logits = model.record_trunk(tape, weighted)?;
    Ok(Recorded {
        input,
        sensor_weights,
        weighted,
        logits,
    })
}

pub(crate) fn check_batch<M: Classifier + ?Sized>(model: &M, x: &Tensor) -> Result<()> {
    let s = x.shape();
    let (t, f) = (model.time_steps(), model.num_features());
    if s.len() != 4 || s[1] != 1 || s[2] != t || s[3] != f {
        return Err(Error::Dimension(format!(
            "model expects input [N, 1, {t}, {f}], got {s:?}"
        )));
    }
    Ok(())
}

/// Infer-mode logits and probabilities for a batch `[N, 1, T, F]`.
pub fn predict<M: Classifier + ?Sized>(model: &M, inputs: &Tensor) -> Result<TaskOutput> {
    const CHUNK: usize = 512;
    check_batch(model, inputs)?;
    let n = inputs.shape()[0];
    let per = model.time_steps() * model.num_features();
    let m = model.num_tasks();
    let mut logits = Vec::with_capacity(n * m);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let chunk = Tensor::new(
            &[end - start, 1, model.time_steps(), model.num_features()],
            inputs.data()[start * per..end * per].to_vec(),
        )?;
        let mut tape = Tape::new();
        let rec = record_logits(model, &mut tape, chunk)?;
        logits.extend_from_slice(tape.value(rec.logits).data());
    }
    let logits = Tensor::new(&[n, m], logits)?;
    let probabilities = ops::sigmoid(&logits);
    Ok(TaskOutput {
        logits,
        probabilities,
    })
}

/// Number of time steps per sample.
pub const TIME_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub num_features: usize,
    pub time_steps: usize,
    pub kernel_widths: [usize; 3],
    pub kernels_per_branch: usize,
    pub dilated_branch: usize,
    pub dilation: usize,
    pub pool_window: (usize, usize),
    pub dropout: f64,
    pub num_tasks: usize,
    pub hidden_width: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            num_features: 24,
            time_steps: TIME_STEPS,
            kernel_widths: [1, 3, 5],
            kernels_per_branch: 32,
            dilated_branch: 2,
            dilation: 2,
            pool_window: (1, 2),
            dropout: 0.5,
            num_tasks: 1,
            hidden_width: 64,
        }
    }
}

impl ArchitectureConfig {
    pub fn new(num_features: usize, num_tasks: usize) -> Self {
        ArchitectureConfig {
            num_features,
            num_tasks,
            ..Default::default()
        }
    }

    pub fn branch_dilation(&self, branch: usize) -> Dilation {
        if branch == self.dilated_branch {
            Dilation::new(1, self.dilation)
        } else {
            Dilation::NONE
        }
    }

    /// Width of each branch after convolution and pooling.
    pub fn pooled_widths(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (b, &kw) in self.kernel_widths.iter().enumerate() {
            let d = self.branch_dilation(b).w;
            let conv_w = ops::dilated_extent(self.num_features, kw, d).ok_or_else(|| {
                Error::Geometry(format!(
                    "branch {b}: kernel width {kw} with dilation {d} needs {} features, have {}",
                    (kw - 1) * d + 1,
                    self.num_features
                ))
            })?;
            if self.pool_window.1 > conv_w || self.pool_window.0 > 1 {
                return Err(Error::Geometry(format!(
                    "branch {b}: pooling window {:?} exceeds the 1x{conv_w} feature map",
                    self.pool_window
                )));
            }
            out[b] = conv_w / self.pool_window.1;
        }
        Ok(out)
    }

    /// Length of the concatenated, flattened branch outputs.
    pub fn flat_width(&self) -> Result<usize> {
        Ok(self.pooled_widths()?.iter().sum::<usize>() * self.kernels_per_branch)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.time_steps != TIME_STEPS {
            problems.push(format!("time_steps must be {TIME_STEPS}, got {}", self.time_steps));
        }
        if self.num_features == 0 {
            problems.push("num_features must be positive".into());
        }
        if self.num_tasks == 0 {
            problems.push("num_tasks must be positive".into());
        }
        if self.kernels_per_branch == 0 {
            problems.push("kernels_per_branch must be positive".into());
        }
        if self.hidden_width == 0 {
            problems.push("hidden_width must be positive".into());
        }
        if self.kernel_widths.contains(&0) {
            problems.push("kernel widths must be positive".into());
        }
        if self.dilated_branch >= 3 {
            problems.push(format!("dilated_branch {} is not 0, 1 or 2", self.dilated_branch));
        }
        if self.dilation < 2 {
            problems.push(format!("dilation must exceed 1, got {}", self.dilation));
        }
        if self.pool_window.0 == 0 || self.pool_window.1 == 0 {
            problems.push("pool window extents must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        self.pooled_widths().map(|_| ())
    }
}

/// One convolution branch with its batch-norm affine and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ArchitectureConfig,
    pub branches: Vec<Branch>,
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    /// Per-sensor input weights (w¹), broadcast over time steps.
    pub sensor_weights: Tensor,
}

/// Name of the sensor weight tensor in checkpoints.
pub const SENSOR_WEIGHTS: &str = "sensor_weights";

fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new(-s, s);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("sized from shape")
}

impl ModelParams {
    /// Fan-scaled uniform weights, zero biases, unit batch-norm scale and
    /// all-ones sensor weights.
    pub fn init<R: Rng + ?Sized>(config: &ArchitectureConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.kernels_per_branch;
        let t = config.time_steps;
        let branches = config
            .kernel_widths
            .iter()
            .map(|&kw| Branch {
                kernels: glorot(&[k, 1, t, kw], t * kw, k * t * kw, rng),
                bias: Tensor::zeros(&[k]),
                gamma: Tensor::ones(&[k]),
                beta: Tensor::zeros(&[k]),
                stats: RunningStats::new(k),
            })
            .collect();
        let d = config.flat_width()?;
        let h = config.hidden_width;
        let m = config.num_tasks;
        Ok(ModelParams {
            config: config.clone(),
            branches,
            hidden_weight: glorot(&[d, h], d, h, rng),
            hidden_bias: Tensor::zeros(&[h]),
            head_weight: glorot(&[h, m], h, m, rng),
            head_bias: Tensor::zeros(&[m]),
            sensor_weights: Tensor::ones(&[config.num_features]),
        })
    }

    /// Every stored tensor under a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            out.push((format!("branch{i}.kernels"), &b.kernels));
            out.push((format!("branch{i}.bias"), &b.bias));
            out.push((format!("branch{i}.bn_gamma"), &b.gamma));
            out.push((format!("branch{i}.bn_beta"), &b.beta));
            out.push((format!("branch{i}.bn_running_mean"), &b.stats.mean));
            out.push((format!("branch{i}.bn_running_var"), &b.stats.var));
        }
        out.push(("hidden.weight".into(), &self.hidden_weight));
        out.push(("hidden.bias".into(), &self.hidden_bias));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out.push((SENSOR_WEIGHTS.into(), &self.sensor_weights));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter_mut().enumerate() {
            out.push((format!("branch{i}.kernels"), &mut b.kernels));
            out.push((format!("branch{i}.bias"), &mut b.bias));
            out.push((format!("branch{i}.bn_gamma"), &mut b.gamma));
            out.push((format!("branch{i}.bn_beta"), &mut b.beta));
            out.push((format!("branch{i}.bn_running_mean"), &mut b.stats.mean));
            out.push((format!("branch{i}.bn_running_var"), &mut b.stats.var));
        }
        out.push(("hidden.weight".into(), &mut self.hidden_weight));
        out.push(("hidden.bias".into(), &mut self.hidden_bias));
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out.push((SENSOR_WEIGHTS.into(), &mut self.sensor_weights));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every learnable tensor as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let branches = self
            .branches
            .iter()
            .map(|b| BranchVars {
                kernels: tape.leaf(b.kernels.clone()),
                bias: tape.leaf(b.bias.clone()),
                gamma: tape.leaf(b.gamma.clone()),
                beta: tape.leaf(b.beta.clone()),
            })
            .collect();
        ParamVars {
            branches,
            hidden_weight: tape.leaf(self.hidden_weight.clone()),
            hidden_bias: tape.leaf(self.hidden_bias.clone()),
            head_weight: tape.leaf(self.head_weight.clone()),
            head_bias: tape.leaf(self.head_bias.clone()),
            sensor_weights: tape.leaf(self.sensor_weights.clone()),
        }
    }

    /// Records `input ⊙ w¹` followed by the trunk; returns the logits.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        self.check_input(tape.value(input))?;
        let weighted = tape.scale_last_axis(input, vars.sensor_weights)?;
        let mut fwd = self.trunk(tape, vars, weighted, mode, rng)?;
        fwd.input = input;
        Ok(fwd)
    }

    /// Everything after the weight layer, starting from its output I¹.
    pub fn trunk<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        weighted: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward> {
        self.check_input(tape.value(weighted))?;
        let cfg = &self.config;
        let n = tape.value(weighted).shape()[0];
        let mut pooled = Vec::with_capacity(3);
        let mut bn_nodes = Vec::with_capacity(3);
        for (i, (branch, bv)) in self.branches.iter().zip(&vars.branches).enumerate() {
            let conv = tape.conv2d(weighted, bv.kernels, bv.bias, cfg.branch_dilation(i))?;
            let bn = match mode {
                Mode::Train => tape.batch_norm_train(conv, bv.gamma, bv.beta)?,
                Mode::Infer => tape.batch_norm_infer(conv, bv.gamma, bv.beta, &branch.stats)?,
            };
            bn_nodes.push(bn);
            let act = tape.relu(bn);
            let pool = tape.avg_pool(act, cfg.pool_window)?;
            let width = tape.value(pool).numel() / n;
            pooled.push(tape.reshape(pool, &[n, width])?);
        }
        let flat = tape.concat(&pooled, 1)?;
        let dropped = tape.dropout(flat, cfg.dropout, mode, rng)?;
        let hidden = tape.dense(dropped, vars.hidden_weight, vars.hidden_bias)?;
        let hidden = tape.relu(hidden);
        let logits = tape.dense(hidden, vars.head_weight, vars.head_bias)?;
        let probs = tape.sigmoid(logits);
        Ok(Forward {
            input: weighted,
            weighted,
            logits,
            probs,
            bn_nodes,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        check_batch(self, x)
    }

    /// Infer-mode logits and probabilities for a batch `[N, 1, T, F]`.
    pub fn predict(&self, inputs: &Tensor) -> Result<TaskOutput> {
        predict(self, inputs)
    }
}

impl Classifier for ModelParams {
    fn num_features(&self) -> usize {
        self.config.num_features
    }

    fn num_tasks(&self) -> usize {
        self.config.num_tasks
    }

    fn time_steps(&self) -> usize {
        self.config.time_steps
    }

    fn sensor_weights(&self) -> &Tensor {
        &self.sensor_weights
    }

    fn sensor_weights_mut(&mut self) -> &mut Tensor {
        &mut self.sensor_weights
    }

    fn record_trunk(&self, tape: &mut Tape, weighted: Var) -> Result<Var> {
        let vars = self.register(tape);
        // Infer mode never draws from the generator.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        Ok(self.trunk(tape, &vars, weighted, Mode::Infer, &mut rng)?.logits)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub kernels: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles for every learnable tensor of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub branches: Vec<BranchVars>,
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    pub sensor_weights: Var,
}

impl ParamVars {
    /// Trunk parameters in the order used by [`ModelParams::trainable_mut`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.extend([b.kernels, b.bias, b.gamma, b.beta]);
        }
        out.extend([
            self.hidden_weight,
            self.hidden_bias,
            self.head_weight,
            self.head_bias,
        ]);
        out
    }
}

impl ModelParams {
    /// Stage-one learnable tensors; excludes w¹ and the running statistics.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            out.push(&mut b.kernels);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.hidden_weight);
        out.push(&mut self.hidden_bias);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}

/// Handles into a recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// The raw input (or I¹ when recorded through [`ModelParams::trunk`]).
    pub input: Var,
    /// Output of the weight layer, I¹.
    pub weighted: Var,
    pub logits: Var,
    pub probs: Var,
    /// Batch-norm nodes, one per branch.
    pub bn_nodes: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
}
