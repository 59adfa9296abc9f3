//! Fine-tuning with false negatives weighted 4:1 over false positives and
//! snapshots chosen by validation TPR.
//!
//! cargo run --release --example recall_biased -- [seed]

use softsense::data::Partition;
use softsense::experiment::{evaluate_checkpoint, finetune_checkpoint, train_baseline, ExperimentConfig};
use softsense::finetune::{FinetuneConfig, Selection};

fn main() -> softsense::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig {
        finetune: FinetuneConfig::recall_biased(),
        selection: Selection::Recall,
        ..ExperimentConfig::benchmark(3, seed)
    };
    let raw = cfg.load_data()?;
    let (base, _) = train_baseline(&cfg, &raw)?;
    let (tuned, trace) = finetune_checkpoint(&cfg, &base, &raw)?;
    println!("kept round {} of {}", trace.selected, trace.rounds.len() - 1);

    let b = evaluate_checkpoint(&cfg, &base, &raw, Partition::Test)?;
    let f = evaluate_checkpoint(&cfg, &tuned, &raw, Partition::Test)?;
    println!("task  tpr            auroc");
    for (bt, ft) in b.tasks.iter().zip(&f.tasks) {
        println!(
            "{:<5} {:.3} -> {:.3}  {:.4} -> {:.4}",
            bt.task, bt.tpr, ft.tpr, bt.auroc, ft.auroc
        );
    }
    Ok(())
}
