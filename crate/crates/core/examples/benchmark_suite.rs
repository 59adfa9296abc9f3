//! Baseline against fine-tuned test metrics on the planted-nuisance
//! benchmark, one line per seed and task.
//!
//! cargo run --release --example benchmark_suite -- [seeds] [tasks]

use std::time::Instant;

use softsense::data::Partition;
use softsense::experiment::{evaluate_checkpoint, finetune_checkpoint, train_baseline, ExperimentConfig};
use softsense::finetune::{FinetuneConfig, Selection};

fn main() -> softsense::Result<()> {
    env_logger::init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(3);
    let tasks = args.get(1).copied().unwrap_or(3);
    println!("seed task base_auroc ft_auroc rec_auroc base_tpr ft_tpr rec_tpr");
    for seed in 0..seeds as u64 {
        let t = Instant::now();
        let cfg = ExperimentConfig::benchmark(tasks, seed);
        let raw = cfg.load_data()?;
        let (base, _) = train_baseline(&cfg, &raw)?;
        let trained = t.elapsed().as_secs_f64();
        let (ft, trace) = finetune_checkpoint(&cfg, &base, &raw)?;
        let rec_cfg = ExperimentConfig {
            finetune: FinetuneConfig::recall_biased(),
            selection: Selection::Recall,
            ..cfg.clone()
        };
        let (rec, rtrace) = finetune_checkpoint(&rec_cfg, &base, &raw)?;
        let [b, f, r] = [&base, &ft, &rec].map(|ck| evaluate_checkpoint(&cfg, ck, &raw, Partition::Test));
        let (b, f, r) = (b?, f?, r?);
        for k in 0..tasks {
            let (bt, ftt, rt) = (&b.tasks[k], &f.tasks[k], &r.tasks[k]);
            println!(
                "{seed} {k} {:.4} {:.4} {:.4} {:.3} {:.3} {:.3}",
                bt.auroc, ftt.auroc, rt.auroc, bt.tpr, ftt.tpr, rt.tpr
            );
        }
        println!(
            "# seed {seed}: selected rounds {} / {}, train {trained:.1}s, total {:.1}s, weights {:?}",
            trace.selected,
            rtrace.selected,
            t.elapsed().as_secs_f64(),
            ft.params
                .sensor_weights
                .data()
                .iter()
                .map(|w| (w * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
