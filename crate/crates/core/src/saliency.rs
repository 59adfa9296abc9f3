//! Input-gradient saliency of the per-task class scores.
//!
//! A sigmoid head has one logit `z` per task. The failed-class score is `z`
//! and the passed-class score is `-z`, so the two maps of a sample are exact
//! negatives of each other. All gradients are taken in infer mode.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SensorSample;
use crate::error::{Error, Result};
use crate::io::{format_significant, write_atomic};
use crate::metrics::ConfusionCell;
use crate::model::{record_logits, Classifier};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Samples per tape when differentiating a batch.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Passed,
    Failed,
}

impl Class {
    pub fn from_label(failed: bool) -> Self {
        if failed {
            Class::Failed
        } else {
            Class::Passed
        }
    }

    /// Sign of the logit in this class's score.
    pub fn sign(self) -> f64 {
        match self {
            Class::Passed => -1.0,
            Class::Failed => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Class::Passed => 0,
            Class::Failed => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Passed => "passed",
            Class::Failed => "failed",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Class::Passed => Class::Failed,
            Class::Failed => Class::Passed,
        }
    }
}

/// Gradient of one class score with respect to one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub sample_id: String,
    pub task: usize,
    pub class: Class,
    /// Confusion cell of the sample, when known.
    pub cell: Option<ConfusionCell>,
    /// Shape `[T, F]`.
    pub values: Tensor,
}

/// Per-sample gradients of a class score, each `[T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradients {
    /// ∂S/∂I, through the weight layer.
    pub input: Vec<Tensor>,
    /// ∂S/∂I¹, the gradient at the weight layer's output.
    pub post_weight: Vec<Tensor>,
}

/// Class-score gradients for a batch `[N, T, F]` of raw inputs, one class
/// per sample. Samples are independent in infer mode, so one backward pass
/// of the summed scores yields every per-sample gradient.
pub fn score_gradients<M: Classifier + ?Sized>(
    model: &M,
    samples: &[&Tensor],
    task: usize,
    classes: &[Class],
) -> Result<ScoreGradients> {
    if samples.len() != classes.len() {
        return Err(Error::Argument(format!(
            "{} samples but {} classes",
            samples.len(),
            classes.len()
        )));
    }
    let m = model.num_tasks();
    if task >= m {
        return Err(Error::Argument(format!("task {task} out of range for {m} tasks")));
    }
    let (t, f) = (model.time_steps(), model.num_features());
    let mut out = ScoreGradients {
        input: Vec::with_capacity(samples.len()),
        post_weight: Vec::with_capacity(samples.len()),
    };
    for (chunk, cls) in samples.chunks(CHUNK).zip(classes.chunks(CHUNK)) {
        let n = chunk.len();
        let mut data = Vec::with_capacity(n * t * f);
        for s in chunk {
            if s.shape() != [t, f] {
                return Err(Error::Dimension(format!(
                    "saliency expects samples [{t}, {f}], got {:?}",
                    s.shape()
                )));
            }
            data.extend_from_slice(s.data());
        }
        let mut tape = Tape::new();
        let rec = record_logits(model, &mut tape, Tensor::new(&[n, 1, t, f], data)?)?;
        let mut coeffs = Tensor::zeros(&[n, m]);
        for (i, c) in cls.iter().enumerate() {
            coeffs.data_mut()[i * m + task] = c.sign();
        }
        let score = tape.dot(rec.logits, coeffs)?;
        let mut grads = tape.backward(score, &[rec.input, rec.weighted])?;
        for (var, dst) in [(rec.input, &mut out.input), (rec.weighted, &mut out.post_weight)] {
            let g = grads.take(var).expect("requested gradient");
            dst.extend(
                g.data()
                    .chunks(t * f)
                    .map(|c| Tensor::new(&[t, f], c.to_vec()).expect("sample sized")),
            );
        }
    }
    Ok(out)
}

/// ∂S/∂I for one `[T, F]` sample.
pub fn saliency<M: Classifier + ?Sized>(
    model: &M,
    sample: &Tensor,
    task: usize,
    class: Class,
) -> Result<Tensor> {
    Ok(score_gradients(model, &[sample], task, &[class])?.input.remove(0))
}

/// ∂S/∂I¹: the gradient stops at the weight layer's output.
pub fn post_weight_gradient<M: Classifier + ?Sized>(
    model: &M,
    sample: &Tensor,
    task: usize,
    class: Class,
) -> Result<Tensor> {
    Ok(score_gradients(model, &[sample], task, &[class])?
        .post_weight
        .remove(0))
}

/// `w¹ ⊙ ∂S/∂I¹`, with the weight-layer factor applied explicitly.
pub fn chain_rule_input_gradient<M: Classifier + ?Sized>(
    model: &M,
    sample: &Tensor,
    task: usize,
    class: Class,
) -> Result<Tensor> {
    let g = post_weight_gradient(model, sample, task, class)?;
    Ok(scale_features(&g, model.sensor_weights()))
}

/// Multiplies each row of a `[T, F]` map by a length-`F` vector.
pub(crate) fn scale_features(map: &Tensor, weights: &Tensor) -> Tensor {
    let w = weights.data();
    let data = map
        .data()
        .chunks(w.len())
        .flat_map(|row| row.iter().zip(w).map(|(a, b)| a * b))
        .collect();
    Tensor::new(map.shape(), data).expect("same shape")
}

/// Saliency maps for labelled samples, each toward `classes[i]`.
///
/// A non-finite gradient is reported against the first sample whose own
/// map is non-finite.
pub fn saliency_maps<M: Classifier + ?Sized>(
    model: &M,
    samples: &[&SensorSample],
    task: usize,
    classes: &[Class],
) -> Result<Vec<SaliencyMap>> {
    let values: Vec<&Tensor> = samples.iter().map(|s| &s.values).collect();
    let grads = match score_gradients(model, &values, task, classes) {
        Ok(g) => g,
        Err(Error::Numeric(msg)) => {
            for (s, &c) in samples.iter().zip(classes) {
                if let Err(Error::Numeric(m)) = score_gradients(model, &[&s.values], task, &[c]) {
                    return Err(Error::Numeric(format!("saliency of sample {}: {m}", s.id)));
                }
            }
            return Err(Error::Numeric(msg));
        }
        Err(e) => return Err(e),
    };
    Ok(samples
        .iter()
        .zip(classes)
        .zip(grads.input)
        .map(|((s, &class), values)| SaliencyMap {
            sample_id: s.id.clone(),
            task,
            class,
            cell: None,
            values,
        })
        .collect())
}

/// Zero-preserving standardization over the nonzero entries, using the
/// population standard deviation. A spread below 1e-12 maps them to 0.
pub fn standardize(map: &Tensor) -> Tensor {
    let nz: Vec<f64> = map.data().iter().copied().filter(|&x| x != 0.0).collect();
    if nz.is_empty() {
        return map.clone();
    }
    let n = nz.len() as f64;
    let mean = nz.iter().sum::<f64>() / n;
    let sd = (nz.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    map.map(|x| {
        if x == 0.0 || sd < 1e-12 {
            0.0
        } else {
            (x - mean) / sd
        }
    })
}

/// Zeroes every entry with `|x| <= theta`.
pub fn clip_small(map: &Tensor, theta: f64) -> Tensor {
    map.map(|x| if x.abs() <= theta { 0.0 } else { x })
}

/// Mean over the time axis of a `[T, F]` map.
pub fn time_mean(map: &Tensor) -> Tensor {
    let (t, f) = (map.shape()[0], map.shape()[1]);
    let mut out = vec![0.0; f];
    for row in map.data().chunks(f) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[f], out.into_iter().map(|v| v / t as f64).collect()).expect("length F")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    ByClass,
    ByConfusionCell,
}

/// Population an aggregate was averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Class(Class),
    Cell(ConfusionCell),
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Class(c) => c.name(),
            Group::Cell(c) => c.name(),
        }
    }

    fn all(grouping: Grouping) -> Vec<Group> {
        match grouping {
            Grouping::ByClass => vec![Group::Class(Class::Passed), Group::Class(Class::Failed)],
            Grouping::ByConfusionCell => ConfusionCell::ALL.into_iter().map(Group::Cell).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSaliency {
    pub task: usize,
    pub group: Group,
    /// Score class the member maps were taken toward.
    pub class: Class,
    /// `[T, F]`, or `[F]` when time was averaged out.
    pub mean: Tensor,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregation {
    pub groups: Vec<AggregateSaliency>,
    /// `(task, group)` pairs with no member maps; left out of `groups`.
    pub missing: Vec<(usize, Group)>,
}

/// Mean map per task and group. Groups are visited in a fixed order; a
/// task's empty groups are listed in `missing`.
pub fn aggregate(maps: &[SaliencyMap], grouping: Grouping, reduce_time: bool) -> Result<Aggregation> {
    let Some(first) = maps.first() else {
        return Ok(Aggregation::default());
    };
    let shape = first.values.shape().to_vec();
    let mut buckets: BTreeMap<(usize, Group), (Class, Vec<f64>, usize)> = BTreeMap::new();
    for m in maps {
        if m.values.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "map {} has shape {:?}, expected {shape:?}",
                m.sample_id,
                m.values.shape()
            )));
        }
        let group = match grouping {
            Grouping::ByClass => Group::Class(m.class),
            Grouping::ByConfusionCell => Group::Cell(m.cell.ok_or_else(|| {
                Error::Argument(format!("map {} has no confusion cell", m.sample_id))
            })?),
        };
        let entry = buckets
            .entry((m.task, group))
            .or_insert_with(|| (m.class, vec![0.0; m.values.numel()], 0));
        for (acc, v) in entry.1.iter_mut().zip(m.values.data()) {
            *acc += v;
        }
        entry.2 += 1;
    }
    let mut tasks: Vec<usize> = maps.iter().map(|m| m.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let mut out = Aggregation::default();
    for task in tasks {
        for group in Group::all(grouping) {
            match buckets.remove(&(task, group)) {
                Some((class, sum, count)) => {
                    let mean = Tensor::new(&shape, sum.into_iter().map(|v| v / count as f64).collect())?;
                    out.groups.push(AggregateSaliency {
                        task,
                        group,
                        class,
                        mean: if reduce_time { time_mean(&mean) } else { mean },
                        count,
                    });
                }
                None => {
                    log::warn!("task {task}: no saliency maps for group {}", group.name());
                    out.missing.push((task, group));
                }
            }
        }
    }
    Ok(out)
}

/// Writes `sample_id,task,class,t,feature_index,value` rows.
pub fn write_maps_csv(path: &Path, maps: &[SaliencyMap]) -> Result<()> {
    let mut out = String::from("sample_id,task,class,t,feature_index,value\n");
    for m in maps {
        let f = m.values.shape()[1];
        for (i, v) in m.values.data().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_field(&m.sample_id),
                m.task,
                m.class.code(),
                i / f,
                i % f,
                format_significant(*v, 9)
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Writes `group,task,class,count,t,feature_index,value` rows; `t` is empty
/// for time-averaged aggregates.
pub fn write_aggregate_csv(path: &Path, aggregates: &[AggregateSaliency]) -> Result<()> {
    let mut out = String::from("group,task,class,count,t,feature_index,value\n");
    for a in aggregates {
        let f = *a.mean.shape().last().expect("rank >= 1");
        let timed = a.mean.rank() == 2;
        for (i, v) in a.mean.data().iter().enumerate() {
            let t = if timed { (i / f).to_string() } else { String::new() };
            out.push_str(&format!(
                "{},{},{},{},{t},{},{}\n",
                a.group.name(),
                a.task,
                a.class.code(),
                a.count,
                i % f,
                format_significant(*v, 9)
            ));
        }
    }
    write_atomic(path, out.as_bytes())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearProbe;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn probe() -> LinearProbe {
        LinearProbe::new(2, t(&[6, 1], &[0.5, -1.0, 2.0, 0.25, 0.0, -3.0]), t(&[1], &[0.1])).unwrap()
    }

    #[test]
    fn linear_probe_saliency_is_its_weight() {
        let p = probe();
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = saliency(&p, &x, 0, Class::Failed).unwrap();
        assert_eq!(s.data(), p.weight.data());
        let neg = saliency(&p, &x, 0, Class::Passed).unwrap();
        assert!(s.data().iter().zip(neg.data()).all(|(a, b)| a + b == 0.0));
    }

    #[test]
    fn zero_sensor_weights_zero_the_chain_rule_map() {
        let mut p = probe();
        p.sensor_weights = Tensor::zeros(&[3]);
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let g = chain_rule_input_gradient(&p, &x, 0, Class::Failed).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_cases() {
        assert_eq!(standardize(&Tensor::zeros(&[2, 3])), Tensor::zeros(&[2, 3]));
        let s = standardize(&t(&[4], &[0., 1., 0., 3.]));
        assert_eq!(s.data(), &[0., -1., 0., 1.]);
        let c = standardize(&t(&[3], &[2., 2., 0.]));
        assert_eq!(c.data(), &[0., 0., 0.]);
    }

    #[test]
    fn clip_cases() {
        let m = t(&[3], &[-0.5, 0.2, 3.0]);
        assert_eq!(clip_small(&m, 0.5).data(), &[0., 0., 3.]);
        assert_eq!(clip_small(&m, 0.0), m);
        assert!(clip_small(&m, f64::INFINITY).data().iter().all(|&v| v == 0.0));
    }

    fn map(task: usize, class: Class, cell: Option<ConfusionCell>, v: &[f64]) -> SaliencyMap {
        SaliencyMap {
            sample_id: format!("s{}", v[0]),
            task,
            class,
            cell,
            values: t(&[2, 2], v),
        }
    }

    #[test]
    fn aggregate_single_and_symmetric() {
        let a = map(0, Class::Failed, None, &[1., 2., 3., 4.]);
        let agg = aggregate(std::slice::from_ref(&a), Grouping::ByClass, false).unwrap();
        assert_eq!(agg.groups.len(), 1);
        assert_eq!(agg.groups[0].mean, a.values);
        assert_eq!(agg.missing, vec![(0, Group::Class(Class::Passed))]);

        let b = map(0, Class::Failed, None, &[-1., -2., -3., -4.]);
        let agg = aggregate(&[a, b], Grouping::ByClass, true).unwrap();
        assert_eq!(agg.groups[0].mean, Tensor::zeros(&[2]));
        assert_eq!(agg.groups[0].count, 2);
    }

    #[test]
    fn aggregate_by_cell_requires_cells() {
        let a = map(1, Class::Failed, None, &[1., 2., 3., 4.]);
        assert!(aggregate(&[a.clone()], Grouping::ByConfusionCell, false).is_err());
        let a = SaliencyMap {
            cell: Some(ConfusionCell::FalsePositive),
            ..a
        };
        let agg = aggregate(&[a], Grouping::ByConfusionCell, true).unwrap();
        assert_eq!(agg.groups[0].group, Group::Cell(ConfusionCell::FalsePositive));
        assert_eq!(agg.groups[0].mean.data(), &[2., 3.]);
        assert_eq!(agg.missing.len(), 3);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_maps_csv(&p, &[map(0, Class::Passed, None, &[1. / 3., 2., 3., 4.])]).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "sample_id,task,class,t,feature_index,value");
        assert_eq!(lines[1], "s0.3333333333333333,0,0,0,0,0.333333333");
        assert_eq!(lines[4], "s0.3333333333333333,0,0,1,1,4");
    }
}
