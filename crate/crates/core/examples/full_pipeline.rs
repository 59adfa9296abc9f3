//! Every stage through the experiment directory API, as the command line
//! runs it: generate, train, visualize, finetune, evaluate, report.
//!
//! cargo run --release --example full_pipeline -- [config.toml]

use std::path::PathBuf;

use softsense::experiment::{Experiment, ExperimentConfig};

fn main() -> softsense::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(&PathBuf::from(p))?,
        None => ExperimentConfig::benchmark(3, 0),
    };
    let exp = Experiment::new(config, Some(&std::env::temp_dir().join("softsense-runs")))?;
    let report = exp.run()?;
    for t in &report.tasks {
        println!(
            "task {} auroc {:.4} -> {:.4} ({:+.4})  tpr {:.3} -> {:.3}",
            t.task, t.baseline.auroc, t.finetuned.auroc, t.delta_auroc, t.baseline.tpr, t.finetuned.tpr
        );
    }
    println!("artifacts in {}", exp.dir.display());
    for (name, file) in &report.artifacts {
        println!("  {name:<20} {file}");
    }
    Ok(())
}
