#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use softsense::data::{DatasetSplit, SensorSample};
use softsense::gradcheck::{activation_pattern, within_tolerance, FD_STEP};
use softsense::model::{ArchitectureConfig, ModelParams, TIME_STEPS};
use softsense::tape::{Mode, Tape, Var};
use softsense::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU kink.
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }

    pub fn assert_ok(&self) {
        assert!(self.failures.is_empty(), "{} mismatches: {:?}", self.failures.len(), &self.failures[..self.failures.len().min(5)]);
        assert!(self.checked > 0);
    }
}

/// `build` records a scalar output from `values` and returns the leaf for
/// each value. Every coordinate of every value is checked.
pub fn fd_check<F>(values: &[Tensor], build: F) -> FdReport
where
    F: Fn(&[Tensor]) -> (Tape, Var, Vec<Var>),
{
    let (tape, out, leaves) = build(values);
    let grads = tape.backward(out, &leaves).unwrap();
    let base_pattern = activation_pattern(&tape);
    let eval = |vals: &[Tensor]| {
        let (t, o, _) = build(vals);
        (t.value(o).item().unwrap(), activation_pattern(&t))
    };
    let mut report = FdReport::default();
    let mut probe = values.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(*leaf).data().to_vec();
        for i in 0..values[k].numel() {
            let x = values[k].data()[i];
            probe[k].data_mut()[i] = x + FD_STEP;
            let (plus, pp) = eval(&probe);
            probe[k].data_mut()[i] = x - FD_STEP;
            let (minus, pm) = eval(&probe);
            probe[k].data_mut()[i] = x;
            if pp != base_pattern || pm != base_pattern {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !within_tolerance(analytic[i], numeric) {
                report.failures.push(format!("value {k} index {i}: analytic {} numeric {numeric}", analytic[i]));
            }
        }
    }
    report
}

/// A small architecture with randomized parameters, affine and running
/// statistics included.
pub fn random_model(num_features: usize, num_tasks: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let cfg = ArchitectureConfig {
        kernels_per_branch: 3,
        hidden_width: 6,
        ..ArchitectureConfig::new(num_features, num_tasks)
    };
    let mut m = ModelParams::init(&cfg, rng).unwrap();
    for b in &mut m.branches {
        b.gamma = uniform(b.gamma.shape(), 0.5, 1.5, rng);
        b.beta = uniform(b.beta.shape(), -0.5, 0.5, rng);
        b.stats.mean = uniform(b.stats.mean.shape(), -0.5, 0.5, rng);
        b.stats.var = uniform(b.stats.var.shape(), 0.5, 2.0, rng);
    }
    m.sensor_weights = uniform(&[num_features], 0.0, 2.0, rng);
    m
}

pub fn random_batch(n: usize, num_features: usize, rng: &mut impl Rng) -> Tensor {
    normal(&[n, 1, TIME_STEPS, num_features], rng)
}

/// Samples whose single task label is `labels[i]`.
pub fn samples_from(prefix: &str, batch: &Tensor, labels: &[bool]) -> Vec<SensorSample> {
    let per = batch.numel() / labels.len();
    let f = per / TIME_STEPS;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let v = Tensor::new(&[TIME_STEPS, f], batch.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            SensorSample::new(format!("{prefix}{i}"), v, vec![Some(y)]).unwrap()
        })
        .collect()
}

pub fn split_of(train: Vec<SensorSample>, valid: Vec<SensorSample>, test: Vec<SensorSample>) -> DatasetSplit {
    let num_features = train[0].num_features();
    let num_tasks = train[0].labels.len();
    DatasetSplit {
        num_features,
        num_tasks,
        train,
        valid,
        test,
    }
}

/// The full model in infer mode: gradients for input, w¹ and every
/// trunk parameter.
pub fn model_graph(params: &ModelParams, labels: Tensor, mode: Mode) -> impl Fn(&[Tensor]) -> (Tape, Var, Vec<Var>) + '_ {
    move |vals: &[Tensor]| {
        let mut p = params.clone();
        p.sensor_weights = vals[1].clone();
        for (slot, v) in p.trainable_mut().into_iter().zip(&vals[2..]) {
            *slot = v.clone();
        }
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let input = tape.leaf(vals[0].clone());
        let fwd = p.forward(&mut tape, &vars, input, mode, &mut rng(0)).unwrap();
        let mask = Tensor::ones(labels.shape());
        let beta = vec![3.0; labels.shape()[1]];
        let l = tape.weighted_bce(fwd.probs, labels.clone(), mask, beta).unwrap();
        let mut leaves = vec![input, vars.sensor_weights];
        leaves.extend(vars.trainable());
        (tape, l, leaves)
    }
}

pub fn model_values(params: &mut ModelParams, x: Tensor) -> Vec<Tensor> {
    let mut vals = vec![x, params.sensor_weights.clone()];
    vals.extend(params.trainable_mut().into_iter().map(|t| t.clone()));
    vals
}
