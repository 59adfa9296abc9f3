//! Stage two: freeze a trained model and fine-tune only its sensor weight
//! layer from the saliency of misclassified samples.
//!
//! cargo run --release --example finetune_weights -- [seed]

use softsense::data::Partition;
use softsense::experiment::{evaluate_checkpoint, finetune_checkpoint, train_baseline, ExperimentConfig};

fn main() -> softsense::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::benchmark(3, seed);
    let raw = cfg.load_data()?;
    let (base, _) = train_baseline(&cfg, &raw)?;
    let (tuned, trace) = finetune_checkpoint(&cfg, &base, &raw)?;

    for r in &trace.rounds {
        println!(
            "round {:>2} misclassified {:>4} valid auroc {:.4} tpr {:.3}",
            r.round,
            r.misclassified,
            r.mean_auroc(),
            r.mean_tpr()
        );
    }
    println!("kept round {}", trace.selected);
    let w: Vec<String> = tuned.params.sensor_weights.data().iter().map(|w| format!("{w:.2}")).collect();
    println!("w1 = [{}]", w.join(" "));

    let b = evaluate_checkpoint(&cfg, &base, &raw, Partition::Test)?;
    let f = evaluate_checkpoint(&cfg, &tuned, &raw, Partition::Test)?;
    for (bt, ft) in b.tasks.iter().zip(&f.tasks) {
        println!("task {} test auroc {:.4} -> {:.4}", bt.task, bt.auroc, ft.auroc);
    }
    Ok(())
}
