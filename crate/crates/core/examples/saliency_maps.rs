//! Trains a baseline, then averages test-set saliency per class and reports
//! how much of it lands on informative, nuisance and pure-noise sensors.
//!
//! cargo run --release --example saliency_maps -- [seed]

use softsense::data::SyntheticSpec;
use softsense::experiment::{train_baseline, ExperimentConfig};
use softsense::saliency::{aggregate, saliency_maps, Class, Grouping};

fn mean_abs(values: &[f64], features: &[usize]) -> f64 {
    features.iter().map(|&j| values[j].abs()).sum::<f64>() / features.len() as f64
}

fn main() -> softsense::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::benchmark(3, seed);
    let spec = SyntheticSpec::benchmark(3, seed);
    let raw = cfg.load_data()?;
    let (ck, _) = train_baseline(&cfg, &raw)?;
    let test = ck.scaler.transform_split(&raw).test;

    for task in 0..3 {
        let labelled: Vec<_> = test.iter().filter(|s| s.labels[task].is_some()).collect();
        let classes: Vec<_> = labelled.iter().map(|s| Class::from_label(s.labels[task] == Some(true))).collect();
        let maps = saliency_maps(&ck.params, &labelled, task, &classes)?;
        for g in aggregate(&maps, Grouping::ByClass, true)?.groups {
            let v = g.mean.data();
            println!(
                "task {task} {:<6} n={:<5} informative {:.3}  nuisance {:.3}  noise {:.3}",
                g.group.name(),
                g.count,
                mean_abs(v, &spec.informative[task]),
                mean_abs(v, &spec.nuisance),
                mean_abs(v, &spec.noise_features()),
            );
        }
    }
    Ok(())
}
