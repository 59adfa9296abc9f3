//! Reproducible runs: one TOML file fixes data, model, training and
//! fine-tuning, and every artifact lands in a directory named by the hash of
//! the resolved configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{
    class_weights, generate, load_csv, write_csv, CsvSchema, DatasetSplit, FeatureScaler, Partition,
    SplitPaths, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::finetune::{finetune_with, FinetuneConfig, Selection, WeightTrace};
use crate::io::{read_to_string, write_atomic};
use crate::metrics::{evaluate, ConfusionCell, MetricReport, TaskMetrics};
use crate::model::{predict, train, ArchitectureConfig, ModelParams, TrainHyper};
use crate::saliency::{aggregate, saliency_maps, write_aggregate_csv, write_maps_csv, Class, Grouping};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A fully specified generator; its seed is replaced by the run seed.
    Synthetic(SyntheticSpec),
    /// [`SyntheticSpec::benchmark`] with the given task count.
    Benchmark { num_tasks: usize },
    /// `train.csv`, `valid.csv` and `test.csv` in `dir`.
    Csv {
        dir: PathBuf,
        num_features: usize,
        num_tasks: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSource,
    /// `num_features` and `num_tasks` are taken from the data.
    #[serde(default)]
    pub model: ArchitectureConfig,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub selection: Selection,
    /// Standardize features with training-partition statistics.
    #[serde(default = "yes")]
    pub scale_inputs: bool,
    /// Partition whose saliency maps are exported.
    #[serde(default = "test_split")]
    pub saliency_split: Partition,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn yes() -> bool {
    true
}

fn test_split() -> Partition {
    Partition::Test
}

impl ExperimentConfig {
    /// A benchmark run with every other setting at its default.
    pub fn benchmark(num_tasks: usize, seed: u64) -> Self {
        let mut cfg = ExperimentConfig {
            seed,
            out_dir: default_out_dir(),
            data: DataSource::Benchmark { num_tasks },
            model: ArchitectureConfig::default(),
            train: TrainHyper::default(),
            finetune: FinetuneConfig::default(),
            selection: Selection::Auroc,
            scale_inputs: true,
            saliency_split: Partition::Test,
        };
        cfg.resolve();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Validation(vec![e.message().to_string()]))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?).map_err(|e| match e {
            Error::Validation(p) => Error::Validation(
                p.into_iter().map(|m| format!("{}: {m}", path.display())).collect(),
            ),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn num_features(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.num_features,
            DataSource::Benchmark { .. } => SyntheticSpec::benchmark(1, 0).num_features,
            DataSource::Csv { num_features, .. } => *num_features,
        }
    }

    pub fn num_tasks(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.tasks.len(),
            DataSource::Benchmark { num_tasks } => *num_tasks,
            DataSource::Csv { num_tasks, .. } => *num_tasks,
        }
    }

    /// Copies data-determined extents and the run seed into nested configs.
    pub fn resolve(&mut self) {
        self.model.num_features = self.num_features();
        self.model.num_tasks = self.num_tasks();
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = self.seed;
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut absorb = |section: &str, r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Validation(p)) => problems.extend(p.into_iter().map(|m| format!("{section}: {m}"))),
            Err(e) => problems.push(format!("{section}: {e}")),
        };
        absorb("model", self.model.validate());
        absorb("finetune", self.finetune.validate(self.num_tasks()));
        match &self.data {
            DataSource::Synthetic(s) => absorb("data", s.validate()),
            DataSource::Benchmark { num_tasks } if *num_tasks == 0 => {
                absorb("data", Err(Error::Validation(vec!["num_tasks must be positive".into()])))
            }
            _ => {}
        }
        if self.train.batch_size < 2 {
            problems.push(format!("train: batch_size {} must be at least 2", self.train.batch_size));
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            problems.push(format!("train: learning_rate {} must be finite and non-negative", self.train.learning_rate));
        }
        if let Some(b) = &self.train.beta {
            if b.len() != self.num_tasks() || b.iter().any(|v| !(*v > 0.0)) {
                problems.push(format!("train: beta {b:?} needs {} positive entries", self.num_tasks()));
            }
        }
        if self.selection == Selection::Recall && self.finetune.gamma_fn < self.finetune.gamma_fp {
            problems.push("recall selection needs finetune.gamma_fn >= finetune.gamma_fp".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `out_dir/exp-<first 16 hex digits of the hash>`.
    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(format!("exp-{}", &self.hash()[..16]))
    }

    /// Raw, unscaled samples.
    pub fn load_data(&self) -> Result<DatasetSplit> {
        match &self.data {
            DataSource::Synthetic(spec) => generate(&SyntheticSpec {
                seed: self.seed,
                ..spec.clone()
            }),
            DataSource::Benchmark { num_tasks } => generate(&SyntheticSpec::benchmark(*num_tasks, self.seed)),
            DataSource::Csv {
                dir,
                num_features,
                num_tasks,
            } => load_csv(
                &SplitPaths::in_dir(dir),
                &CsvSchema {
                    num_features: *num_features,
                    num_tasks: *num_tasks,
                },
            ),
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.finetune.thresholds(self.num_tasks())
    }
}

/// Stage one: fits the input scaler, initializes and trains the model.
pub fn train_baseline(cfg: &ExperimentConfig, raw: &DatasetSplit) -> Result<(Checkpoint, Vec<f64>)> {
    let scaler = if cfg.scale_inputs {
        FeatureScaler::fit(&raw.train, raw.num_features)?
    } else {
        FeatureScaler::identity(raw.num_features)
    };
    let split = scaler.transform_split(raw);
    let beta = match &cfg.train.beta {
        Some(b) => b.clone(),
        None => class_weights(&split)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let init = ModelParams::init(&cfg.model, &mut rng)?;
    let outcome = train(&init, &split.training_set(Partition::Train), &cfg.train, &beta, &mut rng)?;
    Ok((Checkpoint::new(outcome.params, scaler), outcome.loss_trace))
}

/// Stage two on a trained checkpoint; the scaler carries over unchanged.
pub fn finetune_checkpoint(
    cfg: &ExperimentConfig,
    baseline: &Checkpoint,
    raw: &DatasetSplit,
) -> Result<(Checkpoint, WeightTrace)> {
    let split = baseline.scaler.transform_split(raw);
    let out = finetune_with(&baseline.params, &cfg.finetune, &split, cfg.selection)?;
    Ok((Checkpoint::new(out.model, baseline.scaler.clone()), out.trace))
}

/// Metrics of a checkpoint on one partition of raw data.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    raw: &DatasetSplit,
    part: Partition,
) -> Result<MetricReport> {
    let samples: Vec<_> = raw.part(part).iter().map(|s| ck.scaler.transform(s)).collect();
    evaluate(&ck.params, &samples, &cfg.thresholds(), part.name())
}

/// Baseline against fine-tuned metrics for one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task: usize,
    pub baseline: TaskMetrics,
    pub finetuned: TaskMetrics,
    pub delta_auroc: f64,
    pub delta_tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub baseline: f64,
    pub finetuned: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// The resolved configuration, when the report came from a full run.
    pub config: Option<ExperimentConfig>,
    pub config_hash: Option<String>,
    pub split: String,
    pub tasks: Vec<TaskComparison>,
    pub mean_auroc: Summary,
    pub mean_tpr: Summary,
    /// Artifact paths relative to the experiment directory.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock timings live here so the report itself stays
    /// byte-stable across runs.
    pub timing_file: Option<String>,
}

/// Pairs two metric reports task by task.
pub fn compare(baseline: &MetricReport, finetuned: &MetricReport) -> Result<ExperimentReport> {
    if baseline.split != finetuned.split {
        return Err(Error::Validation(vec![format!(
            "baseline is on {} but fine-tuned is on {}",
            baseline.split, finetuned.split
        )]));
    }
    let mut ids: Vec<usize> = baseline.tasks.iter().map(|t| t.task).collect();
    let mut other: Vec<usize> = finetuned.tasks.iter().map(|t| t.task).collect();
    ids.sort_unstable();
    other.sort_unstable();
    if ids != other || ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation(vec![format!(
            "task sets differ or repeat: baseline {ids:?}, fine-tuned {other:?}"
        )]));
    }
    let tasks: Vec<TaskComparison> = ids
        .iter()
        .map(|&k| {
            let b = baseline.task(k).expect("present").clone();
            let f = finetuned.task(k).expect("present").clone();
            TaskComparison {
                task: k,
                delta_auroc: f.auroc - b.auroc,
                delta_tpr: f.tpr - b.tpr,
                baseline: b,
                finetuned: f,
            }
        })
        .collect();
    let summary = |b: f64, f: f64| Summary {
        baseline: b,
        finetuned: f,
        delta: f - b,
    };
    Ok(ExperimentReport {
        config: None,
        config_hash: None,
        split: baseline.split.clone(),
        tasks,
        mean_auroc: summary(baseline.mean_auroc(), finetuned.mean_auroc()),
        mean_tpr: summary(baseline.mean_tpr(), finetuned.mean_tpr()),
        artifacts: BTreeMap::new(),
        timing_file: None,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<MetricReport> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::parse(path, e.to_string()))
}

/// File names inside an experiment directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const DATA_DIR: &str = "data";
    pub const BASELINE: &str = "baseline.ckpt";
    pub const FINETUNED: &str = "finetuned.ckpt";
    pub const LOSS_TRACE: &str = "loss_trace.csv";
    pub const TRACE_JSON: &str = "weight_trace.json";
    pub const TRACE_METRICS: &str = "weight_trace_metrics.csv";
    pub const TRACE_WEIGHTS: &str = "weight_trace_weights.csv";
    pub const SALIENCY_MAPS: &str = "saliency_maps.csv";
    pub const SALIENCY_BY_CLASS: &str = "saliency_by_class.csv";
    pub const SALIENCY_BY_CELL: &str = "saliency_by_cell.csv";
    pub const REPORT: &str = "report.json";
    pub const TIMING: &str = "timing.json";

    pub fn metrics(model: &str, split: &str) -> String {
        format!("metrics_{model}_{split}.json")
    }
}

/// A configuration bound to its output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

impl Experiment {
    /// Validates `config`; `out` replaces its `out_dir`.
    pub fn new(mut config: ExperimentConfig, out: Option<&Path>) -> Result<Self> {
        if let Some(out) = out {
            config.out_dir = out.to_path_buf();
        }
        config.resolve();
        config.validate()?;
        let dir = config.experiment_dir();
        Ok(Experiment { config, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_config(&self) -> Result<()> {
        write_atomic(&self.path(files::CONFIG), self.config.to_toml().as_bytes())
    }

    /// Writes the raw samples as partition CSVs under `data/`.
    pub fn cmd_generate(&self) -> Result<SplitPaths> {
        self.write_config()?;
        let split = self.config.load_data()?;
        write_csv(&split, &self.path(files::DATA_DIR))
    }

    /// Trains from scratch; writes the checkpoint and the loss trace.
    pub fn cmd_train(&self) -> Result<PathBuf> {
        self.write_config()?;
        let raw = self.config.load_data()?;
        let (ck, losses) = train_baseline(&self.config, &raw)?;
        let mut trace = String::from("epoch,loss\n");
        for (e, l) in losses.iter().enumerate() {
            trace.push_str(&format!("{e},{l}\n"));
        }
        write_atomic(&self.path(files::LOSS_TRACE), trace.as_bytes())?;
        let path = self.path(files::BASELINE);
        ck.save(&path)?;
        Ok(path)
    }

    /// Per-sample maps toward each sample's labelled class, their class
    /// means, and time-averaged means per confusion cell toward the
    /// predicted class.
    pub fn cmd_visualize(&self, checkpoint: &Path) -> Result<Vec<PathBuf>> {
        let ck = Checkpoint::load(checkpoint)?;
        let raw = self.config.load_data()?;
        let samples: Vec<_> = raw
            .part(self.config.saliency_split)
            .iter()
            .map(|s| ck.scaler.transform(s))
            .collect();
        let m = ck.params.config.num_tasks;
        let probs = predict(&ck.params, &crate::data::stack(&samples, raw.num_features)?)?.probabilities;
        let thresholds = self.config.thresholds();
        let mut by_label = Vec::new();
        let mut by_prediction = Vec::new();
        for task in 0..m {
            let labelled: Vec<(usize, bool)> = samples
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.labels[task].map(|y| (i, y)))
                .collect();
            let refs: Vec<_> = labelled.iter().map(|&(i, _)| &samples[i]).collect();
            let classes: Vec<Class> = labelled.iter().map(|&(_, y)| Class::from_label(y)).collect();
            let cells: Vec<ConfusionCell> = labelled
                .iter()
                .map(|&(i, y)| ConfusionCell::of(probs.data()[i * m + task] >= thresholds[task], y))
                .collect();
            for (mut map, cell) in saliency_maps(&ck.params, &refs, task, &classes)?.into_iter().zip(&cells) {
                map.cell = Some(*cell);
                by_label.push(map);
            }
            let predicted: Vec<Class> = cells.iter().map(|c| Class::from_label(c.predicted())).collect();
            for (mut map, cell) in saliency_maps(&ck.params, &refs, task, &predicted)?.into_iter().zip(&cells) {
                map.cell = Some(*cell);
                by_prediction.push(map);
            }
        }
        let paths = [files::SALIENCY_MAPS, files::SALIENCY_BY_CLASS, files::SALIENCY_BY_CELL].map(|n| self.path(n));
        write_maps_csv(&paths[0], &by_label)?;
        write_aggregate_csv(&paths[1], &aggregate(&by_label, Grouping::ByClass, false)?.groups)?;
        write_aggregate_csv(&paths[2], &aggregate(&by_prediction, Grouping::ByConfusionCell, true)?.groups)?;
        Ok(paths.to_vec())
    }

    /// Fine-tunes w¹ of `checkpoint`; writes the new checkpoint and trace.
    pub fn cmd_finetune(&self, checkpoint: &Path) -> Result<PathBuf> {
        let baseline = Checkpoint::load(checkpoint)?;
        let raw = self.config.load_data()?;
        let (ck, trace) = finetune_checkpoint(&self.config, &baseline, &raw)?;
        write_json(&self.path(files::TRACE_JSON), &trace)?;
        trace.write_csv(&self.path(files::TRACE_METRICS), &self.path(files::TRACE_WEIGHTS))?;
        let path = self.path(files::FINETUNED);
        ck.save(&path)?;
        Ok(path)
    }

    /// Metrics of `checkpoint` on `part`, written as
    /// `metrics_<checkpoint stem>_<split>.json`.
    pub fn cmd_evaluate(&self, checkpoint: &Path, part: Partition) -> Result<(MetricReport, PathBuf)> {
        let ck = Checkpoint::load(checkpoint)?;
        let raw = self.config.load_data()?;
        let report = evaluate_checkpoint(&self.config, &ck, &raw, part)?;
        let stem = checkpoint
            .file_stem()
            .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        let path = self.path(&files::metrics(&stem, part.name()));
        write_json(&path, &report)?;
        Ok((report, path))
    }

    /// Compares two metric files and writes `report.json`.
    pub fn cmd_report(&self, baseline: &Path, finetuned: &Path) -> Result<(ExperimentReport, PathBuf)> {
        let mut report = compare(&read_metrics(baseline)?, &read_metrics(finetuned)?)?;
        report.config = Some(self.config.clone());
        report.config_hash = Some(self.config.hash());
        for (key, p) in [("baseline_metrics", baseline), ("finetuned_metrics", finetuned)] {
            report.artifacts.insert(key.into(), self.relative(p));
        }
        let path = self.path(files::REPORT);
        write_json(&path, &report)?;
        Ok((report, path))
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).display().to_string()
    }

    /// generate, train, visualize, finetune, evaluate both models on the
    /// test partition and report.
    pub fn run(&self) -> Result<ExperimentReport> {
        let mut timing = BTreeMap::new();
        let mut step = |name: &str, start: Instant| {
            timing.insert(name.to_string(), start.elapsed().as_secs_f64());
        };
        let t = Instant::now();
        if !matches!(self.config.data, DataSource::Csv { .. }) {
            self.cmd_generate()?;
        }
        step("generate", t);
        let t = Instant::now();
        let baseline = self.cmd_train()?;
        step("train", t);
        let t = Instant::now();
        self.cmd_visualize(&baseline)?;
        step("visualize", t);
        let t = Instant::now();
        let finetuned = self.cmd_finetune(&baseline)?;
        step("finetune", t);
        let t = Instant::now();
        let (_, bm) = self.cmd_evaluate(&baseline, Partition::Test)?;
        let (_, fm) = self.cmd_evaluate(&finetuned, Partition::Test)?;
        step("evaluate", t);
        let (mut report, path) = self.cmd_report(&bm, &fm)?;
        for name in [
            files::CONFIG,
            files::BASELINE,
            files::FINETUNED,
            files::LOSS_TRACE,
            files::TRACE_JSON,
            files::TRACE_METRICS,
            files::TRACE_WEIGHTS,
            files::SALIENCY_MAPS,
            files::SALIENCY_BY_CLASS,
            files::SALIENCY_BY_CELL,
        ] {
            let key = name.split('.').next().expect("non-empty name");
            report.artifacts.insert(key.into(), name.into());
        }
        report.timing_file = Some(files::TIMING.into());
        write_json(&path, &report)?;
        write_json(&self.path(files::TIMING), &timing)?;
        Ok(report)
    }
}
