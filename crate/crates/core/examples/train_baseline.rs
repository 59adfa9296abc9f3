//! Stage one: train the dilated CNN on one benchmark seed and report test
//! AUROC and TPR per task.
//!
//! cargo run --release --example train_baseline -- [seed]

use softsense::data::Partition;
use softsense::experiment::{evaluate_checkpoint, train_baseline, ExperimentConfig};

fn main() -> softsense::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::benchmark(3, seed);
    let raw = cfg.load_data()?;
    let (ck, losses) = train_baseline(&cfg, &raw)?;
    for (epoch, loss) in losses.iter().enumerate().step_by(5) {
        println!("epoch {epoch:>2} loss {loss:.4}");
    }
    let report = evaluate_checkpoint(&cfg, &ck, &raw, Partition::Test)?;
    for t in &report.tasks {
        println!("task {} auroc {:.4} tpr {:.3} {:?}", t.task, t.auroc, t.tpr, t.counts);
    }
    Ok(())
}
